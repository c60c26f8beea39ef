#include "spreg/skeleton.hpp"

namespace spreg {

void register_sem_params(ad::ParameterStore& params, const ModelConfig& cfg,
                         Xoshiro256& rng) {
  Matrix w1(cfg.d_t, cfg.d_t), w2(cfg.d_t, cfg.n_skeleton);
  ad::init_glorot(w1, rng);
  ad::init_glorot(w2, rng);
  params.create("sem.mlp.w1", std::move(w1));
  params.create("sem.mlp.b1", Matrix::Zero(1, cfg.d_t), 1);
  params.create("sem.mlp.w2", std::move(w2));
  params.create("sem.mlp.b2", Matrix::Zero(1, cfg.n_skeleton), 1);
}

Skeleton extract_skeleton(const PointCloud& superpoints,
                          const ad::Tensor& features,
                          const ad::ParameterStore& params,
                          const ModelConfig& cfg) {
  if (superpoints.size() < 4)
    throw DegenerateInputError("extract_skeleton: need at least 4 superpoints, got " +
                               std::to_string(superpoints.size()));
  if (features.rows() != superpoints.size())
    throw ShapeError("extract_skeleton: features rows " +
                     std::to_string(features.rows()) + " != superpoints " +
                     std::to_string(superpoints.size()));
  if (features.cols() != cfg.d_t)
    throw ShapeError("extract_skeleton: feature width " +
                     std::to_string(features.cols()) + " != d_t " +
                     std::to_string(cfg.d_t));

  // Gradient blocking: the weight predictor sees detached features only.
  auto h = ad::relu(ad::add_rowvec(
      ad::matmul(ad::detach(features), params.at("sem.mlp.w1")),
      params.at("sem.mlp.b1")));
  auto logits =
      ad::add_rowvec(ad::matmul(h, params.at("sem.mlp.w2")), params.at("sem.mlp.b2"));

  Skeleton skel;
  skel.weights = ad::col_softmax(logits);
  const auto wt = ad::transpose(skel.weights);
  skel.points = ad::matmul(wt, ad::Tensor::constant(Matrix(superpoints.points)));
  skel.features = ad::matmul(wt, features);
  skel.radii = compute_radii(superpoints.points, skel.points, skel.weights);
  return skel;
}

ad::Tensor compute_radii(const Points& superpoints,
                         const ad::Tensor& skeleton_points,
                         const ad::Tensor& weights) {
  if (weights.rows() != superpoints.rows() ||
      weights.cols() != skeleton_points.rows())
    throw ShapeError("compute_radii: weights " + std::to_string(weights.rows()) +
                     "x" + std::to_string(weights.cols()) + " vs " +
                     std::to_string(superpoints.rows()) + " superpoints, " +
                     std::to_string(skeleton_points.rows()) + " skeleton points");
  const auto p = ad::Tensor::constant(Matrix(superpoints));
  const auto closest = ad::row_min(ad::pairwise_distances(p, skeleton_points));
  return ad::matmul(ad::transpose(weights), closest);
}

ad::Tensor skeleton_loss(const PointCloud& superpoints, const Skeleton& skel,
                         const ModelConfig& cfg, Xoshiro256& rng) {
  const Index ns = skel.points.rows();
  const int m = cfg.sphere_samples;

  // Points sampled on each medial sphere: center + radius * unit direction.
  Matrix dirs(ns * m, 3);
  std::vector<int> rep(static_cast<size_t>(ns * m));
  for (Index j = 0; j < ns; ++j) {
    for (int s = 0; s < m; ++s) {
      double u[3];
      rng.unit_vector(u);
      dirs.row(j * m + s) << u[0], u[1], u[2];
      rep[static_cast<size_t>(j * m + s)] = static_cast<int>(j);
    }
  }
  const auto centers = ad::gather_rows(skel.points, rep);
  const auto scaled_dirs =
      ad::mul_colvec(ad::Tensor::constant(std::move(dirs)),
                     ad::gather_rows(skel.radii, rep));
  const auto samples = ad::add(centers, scaled_dirs);

  const auto p = ad::Tensor::constant(Matrix(superpoints.points));
  const auto d_ps = ad::pairwise_distances(p, samples);
  const auto sampling = ad::add(ad::mean(ad::row_min(d_ps)),
                                ad::mean(ad::row_min(ad::transpose(d_ps))));

  // | ||p - c|| - r | over superpoint/sphere pairs.
  const auto d_pc = ad::pairwise_distances(p, skel.points);
  const auto resid = ad::abs(
      ad::add_rowvec(d_pc, ad::scale(ad::transpose(skel.radii), -1.0)));
  const auto p2s = ad::add(ad::sum(ad::row_min(resid)),
                           ad::sum(ad::row_min(ad::transpose(resid))));

  const auto radius_reg = ad::scale(ad::mean(skel.radii), -1.0);

  return ad::add(ad::add(sampling, ad::scale(p2s, cfg.lambda1)),
                 ad::scale(radius_reg, cfg.lambda2));
}

}  // namespace spreg
