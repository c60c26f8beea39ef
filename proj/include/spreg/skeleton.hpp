#pragma once

#include "spreg/config.hpp"
#include "spreg/tensor.hpp"
#include "spreg/types.hpp"

namespace spreg {

/// Medial-axis-style skeleton of one cloud: every skeleton point is a convex
/// combination of the superpoints, with a radius and a feature vector.
struct Skeleton {
  ad::Tensor points;    // N_s x 3
  ad::Tensor radii;     // N_s x 1
  ad::Tensor features;  // N_s x d_t
  ad::Tensor weights;   // |superpoints| x N_s, columns sum to 1

  Points points_value() const { return points.value(); }
  Vector radii_value() const { return radii.value().col(0); }
};

void register_sem_params(ad::ParameterStore& params, const ModelConfig& cfg,
                         Xoshiro256& rng);

/// Weights come from a column-softmax over an MLP applied to the detached
/// superpoint features, so no gradient reaches the backbone through this
/// module's predictor. Skeletal features W^T F keep the feature operand
/// attached; that is the only path from the encoder losses back into the
/// backbone through the skeleton.
Skeleton extract_skeleton(const PointCloud& superpoints,
                          const ad::Tensor& features,
                          const ad::ParameterStore& params,
                          const ModelConfig& cfg);

/// Radii = W^T D where D_i is superpoint i's distance to its closest
/// skeleton point.
ad::Tensor compute_radii(const Points& superpoints,
                         const ad::Tensor& skeleton_points,
                         const ad::Tensor& weights);

/// Skeleton loss: sampling (Chamfer to sphere samples) + lambda1 *
/// point-to-sphere + lambda2 * radius regularizer (-mean radius). The sphere
/// sample directions are drawn from `rng` (cfg.sphere_samples per sphere).
ad::Tensor skeleton_loss(const PointCloud& superpoints, const Skeleton& skel,
                         const ModelConfig& cfg, Xoshiro256& rng);

}  // namespace spreg
