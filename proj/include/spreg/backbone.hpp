#pragma once

#include "spreg/cloud.hpp"
#include "spreg/config.hpp"
#include "spreg/tensor.hpp"

#include <vector>

namespace spreg {

struct FeatureLevel {
  PointCloud cloud;
  ad::Tensor features;  // |cloud| x width(level)
};

/// Hierarchical feature pyramid: repeated voxel downsampling with per-level
/// PointNet-style aggregation and additive top-down fusion. The coarsest
/// level holds the superpoints (width d_t), `dense_level` holds the dense
/// points used for fine matching.
struct FeaturePyramid {
  std::vector<FeatureLevel> levels;
  int superpoint_level = 0;
  int dense_level = 0;

  // Filled by assign_patches: for each dense point its owning superpoint
  // (-1 when truncated away), and per superpoint the retained dense indices
  // ordered by ascending distance to the superpoint.
  std::vector<int> patch_of_dense;
  std::vector<std::vector<int>> patches;

  const PointCloud& superpoints() const {
    return levels[static_cast<size_t>(superpoint_level)].cloud;
  }
  const ad::Tensor& superpoint_features() const {
    return levels[static_cast<size_t>(superpoint_level)].features;
  }
  const PointCloud& dense_points() const {
    return levels[static_cast<size_t>(dense_level)].cloud;
  }
  const ad::Tensor& dense_features() const {
    return levels[static_cast<size_t>(dense_level)].features;
  }
};

/// Creates all backbone parameters. Aggregation MLP weights are split into a
/// relative-coordinate block (`w1_rel`, rows x/y/z) and a neighbor-feature
/// block (`w1_feat`) so the two input groups stay separately addressable.
void register_backbone_params(ad::ParameterStore& params, const ModelConfig& cfg,
                              Xoshiro256& rng);

/// Builds the pyramid from a raw cloud (level-0 voxelization included).
/// Throws DegenerateInputError when the input is empty after level-0
/// voxelization or collapses to fewer than 4 superpoints.
FeaturePyramid extract_pyramid(const PointCloud& cloud,
                               const ad::ParameterStore& params,
                               const ModelConfig& cfg);

/// Nearest-superpoint partition of the dense level, each patch truncated to
/// the cfg.n_patch points closest to its superpoint. Ties prefer the lower
/// superpoint index.
void assign_patches(FeaturePyramid& pyramid, const ModelConfig& cfg);

}  // namespace spreg
