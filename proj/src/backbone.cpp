#include "spreg/backbone.hpp"

#include <algorithm>
#include <string>

namespace spreg {

namespace {

std::string level_key(int l) { return "backbone.l" + std::to_string(l); }

}  // namespace

void register_backbone_params(ad::ParameterStore& params, const ModelConfig& cfg,
                              Xoshiro256& rng) {
  const int L = cfg.levels();
  for (int l = 0; l < L; ++l) {
    const int d_in = l == 0 ? 1 : cfg.backbone_widths[static_cast<size_t>(l - 1)];
    const int d_out = cfg.backbone_widths[static_cast<size_t>(l)];
    Matrix w1_rel(3, d_out), w1_feat(d_in, d_out), w2(d_out, d_out);
    ad::init_glorot(w1_rel, rng);
    ad::init_glorot(w1_feat, rng);
    ad::init_glorot(w2, rng);
    params.create(level_key(l) + ".agg.w1_rel", std::move(w1_rel));
    params.create(level_key(l) + ".agg.w1_feat", std::move(w1_feat));
    params.create(level_key(l) + ".agg.b1", Matrix::Zero(1, d_out), 1);
    params.create(level_key(l) + ".agg.w2", std::move(w2));
    params.create(level_key(l) + ".agg.b2", Matrix::Zero(1, d_out), 1);
  }
  for (int l = cfg.dense_level; l < L - 1; ++l) {
    Matrix w(cfg.backbone_widths[static_cast<size_t>(l + 1)],
             cfg.backbone_widths[static_cast<size_t>(l)]);
    ad::init_glorot(w, rng);
    params.create(level_key(l) + ".fuse.w", std::move(w));
  }
}

namespace {

/// Max-pooled two-layer MLP over [relative coordinate, neighbor feature]
/// rows. `anchors` are the level-l points, neighbors come from `source`.
ad::Tensor aggregate_level(const PointCloud& anchors, const PointCloud& source,
                           const ad::Tensor& source_features,
                           const ad::ParameterStore& params, int level,
                           const ModelConfig& cfg) {
  const Index n = anchors.size();
  const int k = std::min<int>(cfg.backbone_knn, static_cast<int>(source.size()));
  const SpatialIndex index(source);

  Matrix rel(n * k, 3);
  std::vector<int> neighbor_idx(static_cast<size_t>(n * k));
  for (Index i = 0; i < n; ++i) {
    const auto nn = index.knn(anchors.points.row(i), k);
    for (int r = 0; r < k; ++r) {
      rel.row(i * k + r) =
          source.points.row(nn[static_cast<size_t>(r)].first) - anchors.points.row(i);
      neighbor_idx[static_cast<size_t>(i * k + r)] = nn[static_cast<size_t>(r)].first;
    }
  }

  const std::string key = level_key(level);
  const auto rel_t = ad::Tensor::constant(std::move(rel));
  const auto gathered = ad::gather_rows(source_features, neighbor_idx);
  auto h = ad::add(ad::matmul(rel_t, params.at(key + ".agg.w1_rel")),
                   ad::matmul(gathered, params.at(key + ".agg.w1_feat")));
  h = ad::relu(ad::add_rowvec(h, params.at(key + ".agg.b1")));
  h = ad::add_rowvec(ad::matmul(h, params.at(key + ".agg.w2")),
                     params.at(key + ".agg.b2"));
  return ad::rows_max_pool(h, k);
}

}  // namespace

FeaturePyramid extract_pyramid(const PointCloud& cloud,
                               const ad::ParameterStore& params,
                               const ModelConfig& cfg) {
  if (!cloud.valid()) throw ParameterError("extract_pyramid: invalid cloud");
  const int L = cfg.levels();

  FeaturePyramid pyr;
  pyr.superpoint_level = cfg.superpoint_level();
  pyr.dense_level = cfg.dense_level;
  pyr.levels.resize(static_cast<size_t>(L));

  pyr.levels[0].cloud = voxel_downsample(cloud, cfg.backbone_voxels[0]);
  if (pyr.levels[0].cloud.empty())
    throw DegenerateInputError("extract_pyramid: empty after level-0 voxelization");
  for (int l = 1; l < L; ++l)
    pyr.levels[static_cast<size_t>(l)].cloud = voxel_downsample(
        pyr.levels[static_cast<size_t>(l - 1)].cloud,
        cfg.backbone_voxels[static_cast<size_t>(l)]);
  if (pyr.superpoints().size() < 4)
    throw DegenerateInputError(
        "extract_pyramid: cloud collapses to fewer than 4 superpoints (" +
        std::to_string(pyr.superpoints().size()) + ")");

  // Bottom-up aggregation. Level 0 aggregates over itself from constant
  // occupancy features; upper levels aggregate the level below.
  std::vector<ad::Tensor> raw(static_cast<size_t>(L));
  const auto ones =
      ad::Tensor::constant(Matrix::Ones(pyr.levels[0].cloud.size(), 1));
  raw[0] = aggregate_level(pyr.levels[0].cloud, pyr.levels[0].cloud, ones, params,
                           0, cfg);
  for (int l = 1; l < L; ++l)
    raw[static_cast<size_t>(l)] = aggregate_level(
        pyr.levels[static_cast<size_t>(l)].cloud,
        pyr.levels[static_cast<size_t>(l - 1)].cloud,
        raw[static_cast<size_t>(l - 1)], params, l, cfg);

  // Top-down additive fusion, coarsest to the dense level.
  pyr.levels[static_cast<size_t>(L - 1)].features = raw[static_cast<size_t>(L - 1)];
  for (int l = L - 2; l >= 0; --l) {
    if (l < cfg.dense_level) {
      pyr.levels[static_cast<size_t>(l)].features = raw[static_cast<size_t>(l)];
      continue;
    }
    const PointCloud& fine = pyr.levels[static_cast<size_t>(l)].cloud;
    const PointCloud& coarse = pyr.levels[static_cast<size_t>(l + 1)].cloud;
    const SpatialIndex up(coarse);
    std::vector<int> up_idx(static_cast<size_t>(fine.size()));
    for (Index i = 0; i < fine.size(); ++i)
      up_idx[static_cast<size_t>(i)] = up.nearest(fine.points.row(i)).first;
    const auto pulled =
        ad::gather_rows(pyr.levels[static_cast<size_t>(l + 1)].features, up_idx);
    pyr.levels[static_cast<size_t>(l)].features =
        ad::add(raw[static_cast<size_t>(l)],
                ad::matmul(pulled, params.at(level_key(l) + ".fuse.w")));
  }

  assign_patches(pyr, cfg);
  return pyr;
}

void assign_patches(FeaturePyramid& pyramid, const ModelConfig& cfg) {
  const PointCloud& dense = pyramid.dense_points();
  const PointCloud& super = pyramid.superpoints();
  const Index nd = dense.size(), ns = super.size();

  const SpatialIndex super_index(super);
  pyramid.patch_of_dense.assign(static_cast<size_t>(nd), -1);
  pyramid.patches.assign(static_cast<size_t>(ns), {});

  struct Member {
    double dist;
    int idx;
  };
  std::vector<std::vector<Member>> members(static_cast<size_t>(ns));
  for (Index i = 0; i < nd; ++i) {
    const auto [j, d] = super_index.nearest(dense.points.row(i));
    members[static_cast<size_t>(j)].push_back({d, static_cast<int>(i)});
  }
  for (Index j = 0; j < ns; ++j) {
    auto& m = members[static_cast<size_t>(j)];
    std::sort(m.begin(), m.end(), [](const Member& a, const Member& b) {
      return a.dist != b.dist ? a.dist < b.dist : a.idx < b.idx;
    });
    if (static_cast<int>(m.size()) > cfg.n_patch)
      m.resize(static_cast<size_t>(cfg.n_patch));
    for (const Member& mem : m) {
      pyramid.patches[static_cast<size_t>(j)].push_back(mem.idx);
      pyramid.patch_of_dense[static_cast<size_t>(mem.idx)] = static_cast<int>(j);
    }
  }
}

}  // namespace spreg
