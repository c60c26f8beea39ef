#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "spreg/pipeline.hpp"
#include "spreg/skeleton.hpp"
#include "test_support.hpp"

#include <cmath>

using namespace spreg;
using spreg::test::random_matrix;
using spreg::test::random_points;
using spreg::test::random_transform;

namespace {

ModelConfig sk_config(int d_t = 8, int n_s = 4) {
  ModelConfig cfg = ModelConfig::toy_preset();
  cfg.backbone_voxels = {0.5, 1.0};
  cfg.backbone_widths = {4, d_t};
  cfg.dense_level = 0;
  cfg.d_t = d_t;
  cfg.n_skeleton = n_s;
  cfg.knn_embed = std::min(3, n_s);
  cfg.validate();
  return cfg;
}

/// Store with all-zero SEM weights: the logits are zero, softmax is uniform.
ad::ParameterStore zero_sem(const ModelConfig& cfg) {
  ad::ParameterStore params;
  params.create("sem.mlp.w1", Matrix::Zero(cfg.d_t, cfg.d_t));
  params.create("sem.mlp.b1", Matrix::Zero(1, cfg.d_t), 1);
  params.create("sem.mlp.w2", Matrix::Zero(cfg.d_t, cfg.n_skeleton));
  params.create("sem.mlp.b2", Matrix::Zero(1, cfg.n_skeleton), 1);
  return params;
}

}  // namespace

TEST_CASE("extract_skeleton: forced-weight closed forms") {
  const ModelConfig cfg = sk_config();
  Xoshiro256 rng(1);
  const Index n = 6;
  const PointCloud super(random_points(n, rng, 4.0));
  const auto feats = ad::Tensor::constant(random_matrix(n, cfg.d_t, rng));

  const auto params = zero_sem(cfg);
  const Skeleton skel = extract_skeleton(super, feats, params, cfg);

  const Vec3 centroid = super.points.colwise().mean();
  for (Index j = 0; j < cfg.n_skeleton; ++j) {
    CHECK((Vec3(skel.points.value().row(j)) - centroid).norm() < 1e-12);
    CHECK(std::abs(skel.weights.value().col(j).sum() - 1.0) < 1e-12);
    CHECK(std::abs(skel.weights.value()(0, j) - 1.0 / n) < 1e-12);
  }
  // Skeletal features are the feature mean under uniform weights.
  const Matrix mean_feat = feats.value().colwise().mean();
  CHECK((skel.features.value().row(0) - mean_feat.row(0)).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("convex combination algebra with hand-built weights") {
  // One-hot and general weights, checked against direct enumeration.
  Xoshiro256 rng(2);
  const Index n = 6, ns = 2;
  const Points super = random_points(n, rng, 3.0);

  SUBCASE("one-hot weight columns reproduce superpoints and zero radii") {
    Matrix w = Matrix::Zero(n, ns);
    w(2, 0) = 1.0;
    w(4, 1) = 1.0;
    const auto wt = ad::Tensor::constant(w);
    const auto pts =
        ad::matmul(ad::transpose(wt), ad::Tensor::constant(Matrix(super)));
    CHECK((Vec3(pts.value().row(0)) - Vec3(super.row(2))).norm() == 0.0);
    CHECK((Vec3(pts.value().row(1)) - Vec3(super.row(4))).norm() == 0.0);

    // Superpoints coincide with their skeleton points under one-hot weights:
    // the selected superpoints have distance 0, and with all weight mass on
    // them the radii vanish (up to the sqrt-of-cancellation floor of the
    // distance-matrix formula, ~1e-7 at this scale).
    const auto radii = compute_radii(super, pts, wt);
    CHECK(radii.value()(0, 0) < 1e-6);
    CHECK(radii.value()(1, 0) < 1e-6);
  }

  SUBCASE("radii equal the weighted nearest distances (enumeration oracle)") {
    Matrix w(n, ns);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < ns; ++j) w(i, j) = rng.uniform(0.05, 1.0);
    w.col(0) /= w.col(0).sum();
    w.col(1) /= w.col(1).sum();
    const auto wt = ad::Tensor::constant(w);
    const auto pts =
        ad::matmul(ad::transpose(wt), ad::Tensor::constant(Matrix(super)));
    const auto radii = compute_radii(super, pts, wt);

    // Brute-force evaluation of D and W^T D.
    Vector d(n);
    for (Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < ns; ++j)
        best = std::min(best,
                        (Vec3(super.row(i)) - Vec3(pts.value().row(j))).norm());
      d(i) = best;
    }
    for (Index j = 0; j < ns; ++j) {
      double expect = 0.0;
      for (Index i = 0; i < n; ++i) expect += w(i, j) * d(i);
      CHECK(radii.value()(j, 0) == doctest::Approx(expect).epsilon(1e-12));
    }
  }

  SUBCASE("sphere of superpoints: radius equals the sphere radius") {
    const double r = 2.5;
    Points sphere(8, 3);
    Xoshiro256 srng(3);
    for (Index i = 0; i < 8; ++i) {
      double u[3];
      srng.unit_vector(u);
      sphere.row(i) << r * u[0], r * u[1], r * u[2];
    }
    Matrix w = Matrix::Constant(8, 1, 1.0 / 8.0);
    // One skeleton point exactly at the center: every closest distance is r,
    // and convex weights sum to 1.
    const auto center = ad::Tensor::constant(Matrix(Matrix::Zero(1, 3)));
    const auto radii = compute_radii(sphere, center, ad::Tensor::constant(w));
    CHECK(radii.value()(0, 0) == doctest::Approx(r).epsilon(1e-12));
  }
}

TEST_CASE("extract_skeleton: invariants on random clouds") {
  const ModelConfig cfg = sk_config(8, 5);
  Xoshiro256 prng(4);
  ad::ParameterStore params;
  {
    Matrix w1(cfg.d_t, cfg.d_t), w2(cfg.d_t, cfg.n_skeleton);
    ad::init_glorot(w1, prng);
    ad::init_glorot(w2, prng);
    params.create("sem.mlp.w1", std::move(w1));
    params.create("sem.mlp.b1", Matrix::Zero(1, cfg.d_t), 1);
    params.create("sem.mlp.w2", std::move(w2));
    params.create("sem.mlp.b2", Matrix::Zero(1, cfg.n_skeleton), 1);
  }

  Xoshiro256 rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = 8 + static_cast<Index>(rng.below(24));
    const PointCloud super(random_points(n, rng, 6.0));
    const auto feats = ad::Tensor::constant(random_matrix(n, cfg.d_t, rng));
    const Skeleton skel = extract_skeleton(super, feats, params, cfg);

    // Columns sum to one, weights nonnegative.
    for (Index j = 0; j < cfg.n_skeleton; ++j) {
      CHECK(std::abs(skel.weights.value().col(j).sum() - 1.0) < 1e-9);
      CHECK(skel.weights.value().col(j).minCoeff() >= 0.0);
    }
    // Convex hull bound per axis; radii nonnegative.
    for (Index j = 0; j < cfg.n_skeleton; ++j) {
      for (int c = 0; c < 3; ++c) {
        CHECK(skel.points.value()(j, c) >=
              super.points.col(c).minCoeff() - 1e-12);
        CHECK(skel.points.value()(j, c) <=
              super.points.col(c).maxCoeff() + 1e-12);
      }
      CHECK(skel.radii.value()(j, 0) >= 0.0);
    }
  }
}

TEST_CASE("extract_skeleton: rigid equivariance") {
  const ModelConfig cfg = sk_config(8, 5);
  const auto full = init_model_params(cfg);
  Xoshiro256 rng(6);
  const Index n = 20;
  const PointCloud super(random_points(n, rng, 5.0));
  const auto feats = ad::Tensor::constant(random_matrix(n, cfg.d_t, rng));

  const Skeleton skel = extract_skeleton(super, feats, full, cfg);
  const RigidTransform T = random_transform(rng);
  const Skeleton skel_t =
      extract_skeleton(apply_transform(super, T), feats, full, cfg);

  const Points moved = apply_transform(Points(skel.points.value()), T);
  CHECK((skel_t.points.value() - moved).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((skel_t.radii.value() - skel.radii.value()).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((skel_t.features.value() - skel.features.value()).cwiseAbs().maxCoeff() <
        1e-9);
}

TEST_CASE("extract_skeleton: degenerate input") {
  const ModelConfig cfg = sk_config();
  const auto params = init_model_params(cfg);
  Xoshiro256 rng(7);
  const PointCloud three(random_points(3, rng));
  const auto feats = ad::Tensor::constant(random_matrix(3, cfg.d_t, rng));
  CHECK_THROWS_AS(extract_skeleton(three, feats, params, cfg),
                  DegenerateInputError);
}

TEST_CASE("skeleton_loss: closed forms and brute-force oracle") {
  ModelConfig cfg = sk_config(8, 2);
  cfg.sphere_samples = 8;

  SUBCASE("coincident skeleton with zero radii zeroes sampling and p2s") {
    // Skeleton points sit exactly on two superpoints; all radii zero;
    // every superpoint coincides with some skeleton point.
    Points super(2, 3);
    super << 1, 2, 3, -1, 0, 2;
    Skeleton skel;
    skel.points = ad::Tensor::constant(Matrix(super));
    skel.radii = ad::Tensor::constant(Matrix::Zero(2, 1));
    skel.weights = ad::Tensor::constant(Matrix(Matrix::Identity(2, 2)));
    skel.features = ad::Tensor::constant(Matrix::Zero(2, 4));

    cfg.lambda2 = 0.0;  // isolate sampling + p2s
    Xoshiro256 rng(8);
    const auto loss = skeleton_loss(PointCloud{super}, skel, cfg, rng);
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("constant radii r feed -r into the regularizer") {
    Points super(4, 3);
    super << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
    Skeleton skel;
    skel.points = ad::Tensor::constant(Matrix(super));
    skel.radii = ad::Tensor::constant(Matrix::Constant(4, 1, 0.75));
    skel.weights = ad::Tensor::constant(Matrix(Matrix::Identity(4, 4)));
    skel.features = ad::Tensor::constant(Matrix::Zero(4, 4));

    ModelConfig iso = cfg;
    iso.n_skeleton = 4;
    Xoshiro256 rng_a(9), rng_b(9);
    iso.lambda1 = 0.0;
    const auto with_reg = skeleton_loss(PointCloud{super}, skel, iso, rng_a);
    ModelConfig no_reg = iso;
    no_reg.lambda2 = 0.0;
    const auto without = skeleton_loss(PointCloud{super}, skel, no_reg, rng_b);
    CHECK(with_reg.item() - without.item() ==
          doctest::Approx(iso.lambda2 * -0.75).epsilon(1e-12));
  }

  SUBCASE("5-superpoint 2-skeleton instance matches term-by-term oracle") {
    Xoshiro256 rng(10);
    const Points super = random_points(5, rng, 2.0);
    Matrix w(5, 2);
    for (Index i = 0; i < 5; ++i)
      for (Index j = 0; j < 2; ++j) w(i, j) = rng.uniform(0.1, 1.0);
    w.col(0) /= w.col(0).sum();
    w.col(1) /= w.col(1).sum();

    Skeleton skel;
    skel.weights = ad::Tensor::constant(w);
    skel.points = ad::matmul(ad::transpose(skel.weights),
                             ad::Tensor::constant(Matrix(super)));
    skel.radii = compute_radii(super, skel.points, skel.weights);
    skel.features = ad::Tensor::constant(Matrix::Zero(2, 4));

    // The loss draws sphere-sample directions first; replicate with an
    // identically seeded generator.
    Xoshiro256 loss_rng(11), oracle_rng(11);
    const auto loss = skeleton_loss(PointCloud{super}, skel, cfg, loss_rng);

    const Points c = skel.points.value();
    const Vector r = skel.radii.value().col(0);
    const int m = cfg.sphere_samples;
    Points samples(2 * m, 3);
    for (Index j = 0; j < 2; ++j)
      for (int s = 0; s < m; ++s) {
        double u[3];
        oracle_rng.unit_vector(u);
        samples.row(j * m + s) =
            c.row(j) + r(j) * Eigen::RowVector3d(u[0], u[1], u[2]);
      }

    auto min_dist_to = [](const Vec3& p, const Points& set) {
      double best = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < set.rows(); ++i)
        best = std::min(best, (p - Vec3(set.row(i))).norm());
      return best;
    };

    double sampling = 0.0;
    for (Index i = 0; i < 5; ++i)
      sampling += min_dist_to(super.row(i), samples) / 5.0;
    for (Index s = 0; s < samples.rows(); ++s)
      sampling += min_dist_to(samples.row(s), super) /
                  static_cast<double>(samples.rows());

    double p2s = 0.0;
    for (Index i = 0; i < 5; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < 2; ++j)
        best = std::min(best,
                        std::abs((Vec3(super.row(i)) - Vec3(c.row(j))).norm() - r(j)));
      p2s += best;
    }
    for (Index j = 0; j < 2; ++j) {
      double best = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < 5; ++i)
        best = std::min(best,
                        std::abs((Vec3(super.row(i)) - Vec3(c.row(j))).norm() - r(j)));
      p2s += best;
    }

    const double radius_reg = -r.mean();
    const double expect = sampling + cfg.lambda1 * p2s + cfg.lambda2 * radius_reg;
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("gradient blocking: skeleton loss never reaches the features") {
  const ModelConfig cfg = sk_config(8, 4);
  const auto params = init_model_params(cfg);
  Xoshiro256 rng(12);
  const Index n = 12;
  const PointCloud super(random_points(n, rng, 4.0));
  // Features as a *parameter* stands in for the backbone output path.
  const auto feats = ad::Tensor::parameter(random_matrix(n, cfg.d_t, rng));

  const Skeleton skel = extract_skeleton(super, feats, params, cfg);
  Xoshiro256 loss_rng(13);
  const auto loss = skeleton_loss(super, skel, cfg, loss_rng);
  ad::backward(loss);

  CHECK(!feats.grad_allocated());  // no path from the skeleton loss
  CHECK(params.at("sem.mlp.w2").grad().cwiseAbs().maxCoeff() > 0.0);

  // The feature-product path (skeletal features) does carry gradients when
  // an encoder-side loss uses them.
  ad::backward(ad::sum(ad::mul(skel.features, skel.features)));
  CHECK(feats.grad().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("skeleton pipeline gradients match finite differences") {
  const ModelConfig cfg = sk_config(6, 3);
  const auto params = init_model_params(cfg);
  Xoshiro256 rng(14);
  const PointCloud super(random_points(9, rng, 3.0));
  const auto feats = ad::Tensor::constant(random_matrix(9, cfg.d_t, rng));

  const auto build = [&] {
    const Skeleton skel = extract_skeleton(super, feats, params, cfg);
    Xoshiro256 loss_rng(15);
    return skeleton_loss(super, skel, cfg, loss_rng);
  };
  std::vector<ad::Tensor> targets = {params.at("sem.mlp.w1"),
                                     params.at("sem.mlp.w2"),
                                     params.at("sem.mlp.b2")};
  const auto r = spreg::test::check_gradients(build, targets, 1e-5, 25);
  INFO("max rel err ", r.max_rel_err, " over ", r.checked);
  CHECK(r.max_rel_err < 1e-4);
}
