#include "spreg/encoder.hpp"

#include "spreg/kdtree.hpp"

#include <cmath>

namespace spreg {

Eigen::RowVectorXd sinusoidal_embed(double x, int d) {
  if (d < 2 || d % 2 != 0)
    throw ParameterError("sinusoidal_embed: width must be even and >= 2, got " +
                         std::to_string(d));
  Eigen::RowVectorXd out(d);
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, 2.0 * i / static_cast<double>(d));
    out(2 * i) = std::sin(x / freq);
    out(2 * i + 1) = std::cos(x / freq);
  }
  return out;
}

double vector_angle(const Vec3& u, const Vec3& v) {
  const double nu = u.norm(), nv = v.norm();
  if (nu < 1e-12 || nv < 1e-12) return 0.0;
  return std::atan2(u.cross(v).norm(), u.dot(v));
}

namespace {

/// Sinusoidal embedding of every entry of `values` (n rows of scalars),
/// filled into an n x d constant matrix.
Matrix embed_all(const Vector& values, int d) {
  Matrix out(values.size(), d);
  for (Index i = 0; i < values.size(); ++i)
    out.row(i) = sinusoidal_embed(values(i), d);
  return out;
}

/// k nearest rows of `anchor_set` for each row of `queries`; self excluded
/// when both sets are the same matrix (exclude_identical).
std::vector<std::vector<int>> knn_rows(const Points& queries,
                                       const Points& anchor_set, int k,
                                       bool exclude_self) {
  const SpatialIndex index(anchor_set);
  const int avail = static_cast<int>(anchor_set.rows()) - (exclude_self ? 1 : 0);
  const int kk = std::min(k, std::max(avail, 0));
  std::vector<std::vector<int>> out(static_cast<size_t>(queries.rows()));
  for (Index i = 0; i < queries.rows(); ++i) {
    const auto nn = index.knn(queries.row(i), kk + (exclude_self ? 1 : 0));
    auto& dst = out[static_cast<size_t>(i)];
    for (const auto& [idx, dist] : nn) {
      if (exclude_self && idx == static_cast<int>(i)) continue;
      dst.push_back(idx);
      if (static_cast<int>(dst.size()) == kk) break;
    }
  }
  return out;
}

/// Mean angular embedding over the neighbors of token j, for all pairs.
Matrix angular_embedding(const Points& positions, const Points& neighbor_points,
                         const std::vector<std::vector<int>>& neighbors,
                         double sigma_a, int d) {
  const Index L = positions.rows();
  Matrix out = Matrix::Zero(L * L, d);
  for (Index j = 0; j < L; ++j) {
    const auto& nbr = neighbors[static_cast<size_t>(j)];
    if (nbr.empty()) continue;
    const Vec3 pj = positions.row(j);
    for (Index i = 0; i < L; ++i) {
      const Vec3 rel = Vec3(positions.row(i)) - pj;
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
      for (int x : nbr) {
        const Vec3 arm = Vec3(neighbor_points.row(x)) - pj;
        acc += sinusoidal_embed(vector_angle(arm, rel) / sigma_a, d);
      }
      out.row(i * L + j) = acc / static_cast<double>(nbr.size());
    }
  }
  return out;
}

ad::Tensor ffn_block(const ad::Tensor& x, const std::string& prefix,
                     const ad::ParameterStore& params) {
  auto h = ad::relu(ad::add_rowvec(ad::matmul(x, params.at(prefix + ".w1")),
                                   params.at(prefix + ".b1")));
  return ad::add_rowvec(ad::matmul(h, params.at(prefix + ".w2")),
                        params.at(prefix + ".b2"));
}

ad::Tensor post_attention(const ad::Tensor& input, const ad::Tensor& attended,
                          const std::string& prefix,
                          const ad::ParameterStore& params) {
  auto h = ad::layer_norm(ad::add(input, attended),
                          params.at(prefix + ".ln1.gamma"),
                          params.at(prefix + ".ln1.beta"));
  return ad::layer_norm(ad::add(h, ffn_block(h, prefix + ".ffn", params)),
                        params.at(prefix + ".ln2.gamma"),
                        params.at(prefix + ".ln2.beta"));
}

void register_block(ad::ParameterStore& params, const std::string& prefix,
                    bool with_structure, const ModelConfig& cfg,
                    Xoshiro256& rng) {
  const int d = cfg.d_t;
  auto mat = [&](int r, int c) {
    Matrix w(r, c);
    ad::init_glorot(w, rng);
    return w;
  };
  params.create(prefix + ".wq", mat(d, d));
  params.create(prefix + ".wk", mat(d, d));
  params.create(prefix + ".wv", mat(d, d));
  if (with_structure) {
    params.create(prefix + ".wp", mat(d, d));
    params.create(prefix + ".ws", mat(d, d));
  }
  params.create(prefix + ".ln1.gamma", Matrix::Ones(1, d), 1);
  params.create(prefix + ".ln1.beta", Matrix::Zero(1, d), 1);
  params.create(prefix + ".ffn.w1", mat(d, 2 * d));
  params.create(prefix + ".ffn.b1", Matrix::Zero(1, 2 * d), 1);
  params.create(prefix + ".ffn.w2", mat(2 * d, d));
  params.create(prefix + ".ffn.b2", Matrix::Zero(1, d), 1);
  params.create(prefix + ".ln2.gamma", Matrix::Ones(1, d), 1);
  params.create(prefix + ".ln2.beta", Matrix::Zero(1, d), 1);
}

}  // namespace

void register_encoder_params(ad::ParameterStore& params, const ModelConfig& cfg,
                             Xoshiro256& rng) {
  const int d = cfg.d_t;
  auto mat = [&](int r, int c) {
    Matrix w(r, c);
    ad::init_glorot(w, rng);
    return w;
  };
  params.create("encoder.embed.point.wd", mat(d, d));
  params.create("encoder.embed.point.wa", mat(d, d));
  params.create("encoder.embed.skel.wd", mat(d, d));
  params.create("encoder.embed.skel.wa", mat(d, d));
  for (int r = 0; r < cfg.rounds; ++r) {
    const std::string base = "encoder.r" + std::to_string(r);
    register_block(params, base + ".self", true, cfg, rng);
    register_block(params, base + ".cross", false, cfg, rng);
  }
}

ad::Tensor compute_point_structure_embedding(const Points& positions,
                                             const ad::ParameterStore& params,
                                             const ModelConfig& cfg) {
  const Index L = positions.rows();
  if (L < 2)
    throw DegenerateInputError("point structure embedding needs >= 2 tokens");
  const int d = cfg.d_t;

  Vector dists(L * L);
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < L; ++j)
      dists(i * L + j) =
          (positions.row(i) - positions.row(j)).norm() / cfg.sigma_d;
  const Matrix dist_emb = embed_all(dists, d);

  const auto neighbors = knn_rows(positions, positions, cfg.knn_embed, true);
  const Matrix ang_emb =
      angular_embedding(positions, positions, neighbors, cfg.sigma_a(), d);

  return ad::add(ad::matmul(ad::Tensor::constant(dist_emb),
                            params.at("encoder.embed.point.wd")),
                 ad::matmul(ad::Tensor::constant(ang_emb),
                            params.at("encoder.embed.point.wa")));
}

SkeletonEmbedding compute_skeleton_structure_embedding(
    const Points& positions, const Points& skeleton_points,
    const ad::ParameterStore& params, const ModelConfig& cfg) {
  const Index L = positions.rows();
  if (skeleton_points.rows() < cfg.knn_embed)
    throw DegenerateInputError(
        "skeleton structure embedding: fewer skeleton points than k");
  const int d = cfg.d_t;

  const auto neighbors =
      knn_rows(positions, skeleton_points, cfg.knn_embed, false);

  Vector rho(L);
  for (Index j = 0; j < L; ++j) {
    double sum = 0.0;
    for (int x : neighbors[static_cast<size_t>(j)])
      sum += (Vec3(skeleton_points.row(x)) - Vec3(positions.row(j))).norm();
    rho(j) = sum;
  }

  Vector rho_diff(L * L);
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < L; ++j)
      rho_diff(i * L + j) = (rho(i) - rho(j)) / cfg.sigma_d_skel;
  const Matrix dist_emb = embed_all(rho_diff, d);

  const Matrix ang_emb = angular_embedding(positions, skeleton_points, neighbors,
                                           cfg.sigma_a_skel(), d);

  SkeletonEmbedding out;
  out.r_s = ad::add(ad::matmul(ad::Tensor::constant(dist_emb),
                               params.at("encoder.embed.skel.wd")),
                    ad::matmul(ad::Tensor::constant(ang_emb),
                               params.at("encoder.embed.skel.wa")));
  out.rho = std::move(rho);
  return out;
}

SelfAttentionOut self_attention_layer(const ad::Tensor& x,
                                      const StructureEmbeddings& emb,
                                      const std::string& prefix,
                                      const ad::ParameterStore& params,
                                      const ModelConfig& cfg) {
  const Index L = x.rows();
  const auto q = ad::matmul(x, params.at(prefix + ".wq"));
  const auto k = ad::matmul(x, params.at(prefix + ".wk"));
  const auto v = ad::matmul(x, params.at(prefix + ".wv"));
  const auto structure = ad::add(ad::matmul(emb.r_p, params.at(prefix + ".wp")),
                                 ad::matmul(emb.r_s, params.at(prefix + ".ws")));

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_t));
  const auto e = ad::scale(ad::add(ad::matmul(q, ad::transpose(k)),
                                   ad::pair_scores(q, structure, L)),
                           inv_sqrt_d);
  const auto a = ad::row_softmax(e);

  SelfAttentionOut out;
  out.scores = a;
  out.positional = ad::pair_combine(a, emb.r_s);
  out.features = post_attention(x, ad::matmul(a, v), prefix, params);
  return out;
}

std::pair<ad::Tensor, ad::Tensor> cross_attention_layer(
    const ad::Tensor& x_p, const ad::Tensor& e_p, const ad::Tensor& x_q,
    const ad::Tensor& e_q, Index n_super_p, Index n_super_q,
    const std::string& prefix, const ad::ParameterStore& params,
    const ModelConfig& cfg) {
  const auto xp_pos = ad::add(x_p, e_p);
  const auto xq_pos = ad::add(x_q, e_q);

  auto keys_of = [&](const ad::Tensor& t, Index n_super) {
    if (cfg.cross_attention_full) return t;
    std::vector<int> rows(static_cast<size_t>(n_super));
    for (Index i = 0; i < n_super; ++i) rows[static_cast<size_t>(i)] = static_cast<int>(i);
    return ad::gather_rows(t, rows);
  };
  const auto kv_q = keys_of(xq_pos, n_super_q);
  const auto kv_p = keys_of(xp_pos, n_super_p);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_t));
  auto attend = [&](const ad::Tensor& queries_pos, const ad::Tensor& kv,
                    const ad::Tensor& input) {
    const auto q = ad::matmul(queries_pos, params.at(prefix + ".wq"));
    const auto k = ad::matmul(kv, params.at(prefix + ".wk"));
    const auto v = ad::matmul(kv, params.at(prefix + ".wv"));
    const auto a =
        ad::row_softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
    return post_attention(input, ad::matmul(a, v), prefix, params);
  };

  return {attend(xp_pos, kv_q, x_p), attend(xq_pos, kv_p, x_q)};
}

std::pair<HybridFeatures, HybridFeatures> encode(const FeaturePyramid& pyr_p,
                                                 const Skeleton& skel_p,
                                                 const FeaturePyramid& pyr_q,
                                                 const Skeleton& skel_q,
                                                 const ad::ParameterStore& params,
                                                 const ModelConfig& cfg) {
  struct Side {
    ad::Tensor x;
    StructureEmbeddings emb;
    Index n_super;
    Index n_skel;
  };

  auto make_side = [&](const FeaturePyramid& pyr, const Skeleton& skel) {
    Side s;
    s.n_super = pyr.superpoints().size();
    s.n_skel = skel.points.rows();
    s.x = ad::concat_rows(pyr.superpoint_features(), skel.features);

    Points positions(s.n_super + s.n_skel, 3);
    positions.topRows(s.n_super) = pyr.superpoints().points;
    // Embeddings read positions as plain geometry; gradients into the
    // skeleton predictor flow through features and the skeleton loss, not
    // through the attention geometry.
    positions.bottomRows(s.n_skel) = skel.points.value();

    if (cfg.rounds > 0) {
      s.emb.r_p = compute_point_structure_embedding(positions, params, cfg);
      auto se = compute_skeleton_structure_embedding(
          positions, skel.points.value(), params, cfg);
      s.emb.r_s = se.r_s;
      s.emb.rho = std::move(se.rho);
    }
    return s;
  };

  Side p = make_side(pyr_p, skel_p);
  Side q = make_side(pyr_q, skel_q);

  for (int r = 0; r < cfg.rounds; ++r) {
    const std::string base = "encoder.r" + std::to_string(r);
    const auto self_p = self_attention_layer(p.x, p.emb, base + ".self", params, cfg);
    const auto self_q = self_attention_layer(q.x, q.emb, base + ".self", params, cfg);
    std::tie(p.x, q.x) = cross_attention_layer(
        self_p.features, self_p.positional, self_q.features, self_q.positional,
        p.n_super, q.n_super, base + ".cross", params, cfg);
  }

  auto split = [](const Side& s) {
    HybridFeatures h;
    std::vector<int> super_rows(static_cast<size_t>(s.n_super));
    std::vector<int> skel_rows(static_cast<size_t>(s.n_skel));
    for (Index i = 0; i < s.n_super; ++i) super_rows[static_cast<size_t>(i)] = static_cast<int>(i);
    for (Index i = 0; i < s.n_skel; ++i)
      skel_rows[static_cast<size_t>(i)] = static_cast<int>(s.n_super + i);
    h.superpoint = ad::gather_rows(s.x, super_rows);
    h.skeletal = ad::gather_rows(s.x, skel_rows);
    return h;
  };
  return {split(p), split(q)};
}

}  // namespace spreg
