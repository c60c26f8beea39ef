#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "spreg/backbone.hpp"
#include "spreg/pipeline.hpp"
#include "spreg/synth.hpp"
#include "test_support.hpp"

using namespace spreg;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg = ModelConfig::toy_preset();
  cfg.backbone_voxels = {0.5, 1.0, 2.0, 4.0};
  cfg.backbone_widths = {8, 8, 12, 16};
  cfg.d_t = 16;
  cfg.n_skeleton = 6;
  cfg.backbone_knn = 8;
  cfg.n_patch = 16;
  cfg.rounds = 1;
  cfg.n_coarse = 24;
  cfg.n_replace = 6;
  cfg.n_topk_skeletal = 4;
  cfg.validate();
  return cfg;
}

}  // namespace

TEST_CASE("extract_pyramid: structure invariants") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_model_params(cfg);
  const PointCloud scene = make_procedural_scene(42, 6000);

  const FeaturePyramid pyr = extract_pyramid(scene, params, cfg);

  SUBCASE("level point counts are non-increasing") {
    REQUIRE(pyr.levels.size() == 4);
    for (size_t l = 1; l < pyr.levels.size(); ++l)
      CHECK(pyr.levels[l].cloud.size() <= pyr.levels[l - 1].cloud.size());
  }
  SUBCASE("features match point counts, widths from config") {
    for (size_t l = 0; l < pyr.levels.size(); ++l) {
      CHECK(pyr.levels[l].features.rows() == pyr.levels[l].cloud.size());
      CHECK(pyr.levels[l].features.cols() == cfg.backbone_widths[l]);
    }
    CHECK(pyr.superpoint_features().cols() == cfg.d_t);
  }
  SUBCASE("patches partition the retained dense points") {
    std::vector<int> seen(static_cast<size_t>(pyr.dense_points().size()), 0);
    for (size_t j = 0; j < pyr.patches.size(); ++j) {
      CHECK(static_cast<int>(pyr.patches[j].size()) <= cfg.n_patch);
      for (int idx : pyr.patches[j]) {
        seen[static_cast<size_t>(idx)] += 1;
        CHECK(pyr.patch_of_dense[static_cast<size_t>(idx)] == static_cast<int>(j));
      }
    }
    for (Index i = 0; i < pyr.dense_points().size(); ++i) {
      const int owner = pyr.patch_of_dense[static_cast<size_t>(i)];
      if (owner >= 0) CHECK(seen[static_cast<size_t>(i)] == 1);
      else CHECK(seen[static_cast<size_t>(i)] == 0);
    }
  }
  SUBCASE("deterministic given identical input") {
    const FeaturePyramid again = extract_pyramid(scene, params, cfg);
    CHECK((again.superpoint_features().value() -
           pyr.superpoint_features().value())
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("extract_pyramid: degenerate inputs") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_model_params(cfg);

  SUBCASE("empty input") {
    CHECK_THROWS_AS(extract_pyramid(PointCloud{}, params, cfg),
                    DegenerateInputError);
  }
  SUBCASE("single tight cluster collapses to one superpoint") {
    Xoshiro256 rng(2);
    Points p(100, 3);
    for (Index i = 0; i < 100; ++i)
      for (int c = 0; c < 3; ++c) p(i, c) = 0.01 * rng.uniform();
    CHECK_THROWS_AS(extract_pyramid(PointCloud{p}, params, cfg),
                    DegenerateInputError);
  }
}

TEST_CASE("extract_pyramid: rigid copy with frame-aligned weights") {
  // A 90-degree yaw maps the voxel partition onto itself (cells permute).
  // Rotating the relative-coordinate rows of every first-layer weight block
  // by the same rotation makes the aggregation see identical inputs, so the
  // features must match up to the voxel-induced row permutation.
  const ModelConfig cfg = tiny_config();
  const auto params = init_model_params(cfg);
  const PointCloud scene = make_procedural_scene(7, 6000);

  const Mat3 rot = RigidTransform::from_yaw_pitch_roll(M_PI / 2, 0, 0).rotation;
  RigidTransform T;
  T.rotation = rot;

  ad::ParameterStore aligned = params.detached_copy();
  for (int l = 0; l < cfg.levels(); ++l) {
    const std::string key = "backbone.l" + std::to_string(l) + ".agg.w1_rel";
    aligned.at(key).value() = rot * params.at(key).value();
  }

  const FeaturePyramid pyr = extract_pyramid(scene, params, cfg);
  const FeaturePyramid pyr_rot =
      extract_pyramid(apply_transform(scene, T), aligned, cfg);

  REQUIRE(pyr.superpoints().size() == pyr_rot.superpoints().size());

  // Match superpoints through the rotation, then compare feature rows.
  const SpatialIndex index(pyr_rot.superpoints());
  double max_diff = 0.0;
  for (Index i = 0; i < pyr.superpoints().size(); ++i) {
    const Vec3 moved = rot * Vec3(pyr.superpoints().points.row(i));
    const auto [j, d] = index.nearest(moved);
    REQUIRE(d < 1e-9);
    max_diff = std::max(max_diff,
                        (pyr.superpoint_features().value().row(i) -
                         pyr_rot.superpoint_features().value().row(j))
                            .cwiseAbs()
                            .maxCoeff());
  }
  CHECK(max_diff < 1e-9);
}

TEST_CASE("assign_patches: tie and truncation rules") {
  ModelConfig cfg = tiny_config();

  // Hand-built pyramid: 2 superpoints, 5 dense points on a line.
  FeaturePyramid pyr;
  pyr.superpoint_level = 1;
  pyr.dense_level = 0;
  pyr.levels.resize(2);
  Points dense(5, 3);
  dense << 0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0, 4, 0, 0;
  Points super(2, 3);
  super << 0, 0, 0, 4, 0, 0;
  pyr.levels[0].cloud = PointCloud{dense};
  pyr.levels[1].cloud = PointCloud{super};

  SUBCASE("equidistant dense point goes to the lower superpoint index") {
    cfg.n_patch = 16;
    assign_patches(pyr, cfg);
    CHECK(pyr.patch_of_dense[2] == 0);  // x=2 is equidistant to both
    CHECK(pyr.patches[0].size() == 3);
    CHECK(pyr.patches[1].size() == 2);
  }
  SUBCASE("n_patch = 1 keeps only the closest dense point") {
    cfg.n_patch = 1;
    assign_patches(pyr, cfg);
    REQUIRE(pyr.patches[0].size() == 1);
    REQUIRE(pyr.patches[1].size() == 1);
    CHECK(pyr.patches[0][0] == 0);
    CHECK(pyr.patches[1][0] == 4);
    CHECK(pyr.patch_of_dense[1] == -1);  // truncated away
  }
  SUBCASE("one superpoint owns everything") {
    Points one(1, 3);
    one << 0, 0, 0;
    pyr.levels[1].cloud = PointCloud{one};
    cfg.n_patch = 3;
    assign_patches(pyr, cfg);
    REQUIRE(pyr.patches.size() == 1);
    CHECK(pyr.patches[0].size() == 3);  // truncated to n_patch nearest
    CHECK(pyr.patches[0][0] == 0);
  }
}

TEST_CASE("backbone gradients flow to every backbone parameter") {
  ModelConfig cfg = tiny_config();
  cfg.backbone_voxels = {0.5, 1.0};
  cfg.backbone_widths = {6, 8};
  cfg.d_t = 8;
  cfg.dense_level = 0;
  cfg.validate();
  const auto params = init_model_params(cfg);
  Xoshiro256 rng(3);
  const PointCloud cloud(spreg::test::random_points(120, rng, 6.0));

  const FeaturePyramid pyr = extract_pyramid(cloud, params, cfg);
  // Touch both output surfaces: the fuse projection only feeds the dense level.
  ad::backward(ad::add(
      ad::sum(ad::mul(pyr.superpoint_features(), pyr.superpoint_features())),
      ad::sum(ad::mul(pyr.dense_features(), pyr.dense_features()))));

  for (const auto& [path, t] : params) {
    if (path.rfind("backbone.", 0) != 0) continue;
    INFO(path);
    CHECK(t.grad().cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("backbone finite differences on a small instance") {
  ModelConfig cfg = tiny_config();
  cfg.backbone_voxels = {0.5, 1.0};
  cfg.backbone_widths = {4, 6};
  cfg.d_t = 6;
  cfg.dense_level = 0;
  cfg.backbone_knn = 4;
  cfg.validate();
  const auto params = init_model_params(cfg);
  Xoshiro256 rng(4);
  const PointCloud cloud(spreg::test::random_points(40, rng, 5.0));

  const auto build = [&] {
    const FeaturePyramid pyr = extract_pyramid(cloud, params, cfg);
    Xoshiro256 wr(9);
    return ad::sum(ad::mul_const(
        pyr.superpoint_features(),
        spreg::test::random_matrix(pyr.superpoint_features().rows(),
                                   pyr.superpoint_features().cols(), wr)));
  };
  std::vector<ad::Tensor> targets;
  for (const auto& [path, t] : params)
    if (path.rfind("backbone.", 0) == 0) targets.push_back(t);
  const auto r = spreg::test::check_gradients(build, targets, 1e-5, 20);
  INFO("max rel err ", r.max_rel_err, " over ", r.checked, " entries");
  CHECK(r.max_rel_err < 1e-4);
}
