#pragma once

#include "spreg/backbone.hpp"
#include "spreg/config.hpp"
#include "spreg/encoder.hpp"
#include "spreg/matching.hpp"
#include "spreg/skeleton.hpp"

#include <map>
#include <string>

namespace spreg {

/// All model parameters (backbone, SEM, encoder) created in a fixed order
/// from the config seed.
ad::ParameterStore init_model_params(const ModelConfig& cfg);

/// Directional patch overlap fractions under the ground-truth transform:
/// p_to_q(i, j) is the fraction of patch i's dense points with a counterpart
/// in patch j within tau_a after alignment.
struct PatchOverlaps {
  Matrix p_to_q;
  Matrix q_to_p;
};
PatchOverlaps compute_patch_overlaps(const FeaturePyramid& pyr_p,
                                     const FeaturePyramid& pyr_q,
                                     const RigidTransform& gt,
                                     const ModelConfig& cfg);

/// Overlap-aware circle loss on L2-normalized superpoint features, averaged
/// over the anchors of both directions. Returns a zero scalar when no patch
/// pair overlaps.
ad::Tensor overlap_circle_loss(const ad::Tensor& feats_p,
                               const ad::Tensor& feats_q,
                               const PatchOverlaps& overlaps,
                               const ModelConfig& cfg);

/// Negative log-likelihood of ground-truth assignments (matches and slack)
/// under the Sinkhorn-normalized patch similarity, averaged per pair over
/// cfg.loss_patch_pairs sampled overlapping patch pairs.
ad::Tensor point_matching_loss(const FeaturePyramid& pyr_p,
                               const FeaturePyramid& pyr_q,
                               const PatchOverlaps& overlaps,
                               const RigidTransform& gt, const ModelConfig& cfg,
                               Xoshiro256& rng);

struct RegistrationResult {
  RigidTransform transform;
  CorrespondenceSet superpoint_corr;
  CorrespondenceSet skeletal_raw;
  CorrespondenceSet skeletal_denoised;
  CorrespondenceSet hybrid;  // final coarse set fed to dense matching
  DenseMatches dense;
  int lgr_inliers = 0;
  bool lgr_fallback = false;

  // Coordinates for resolving correspondence indices per kind.
  Points superpoints_p{0, 3}, superpoints_q{0, 3};
  Points skeleton_p{0, 3}, skeleton_q{0, 3};

  std::map<std::string, double> timing_ms;
};

/// Full inference: pyramid -> skeleton -> encoder -> coarse/skeletal
/// matching -> spectral denoising -> hybrid resampling -> dense matching ->
/// local-to-global estimation.
RegistrationResult register_clouds(const PointCloud& src, const PointCloud& tgt,
                                   const ad::ParameterStore& params,
                                   const ModelConfig& cfg);

struct TrainSample {
  PointCloud source;
  PointCloud target;
  RigidTransform gt;
  double overlap = -1.0;
  double scale = 1.0;  // recorded separately; GT stays rigid
};

struct EpochMetrics {
  double mean_registration_loss = 0.0;  // circle + point matching
  double mean_skeleton_loss = 0.0;
  double mean_coarse_inlier_ratio = 0.0;
  int samples_used = 0;
  int samples_skipped = 0;
};

/// One pass over the dataset, batch size 1. Joint optimization of the
/// registration and skeleton losses by default; cfg.alternate_losses
/// switches to alternating the two objectives between samples. Throws
/// EpochError when more than half the samples produce non-finite losses.
EpochMetrics train_epoch(const std::vector<TrainSample>& dataset,
                         ad::ParameterStore& params, ad::AdamState& adam,
                         const ModelConfig& cfg, Xoshiro256& rng);

/// Inlier ratio of a correspondence set under a ground-truth transform:
/// fraction with || T(p) - q || < tau. Returns 0 for an empty set.
double inlier_ratio(const CorrespondenceSet& corr, const Points& src_coords,
                    const Points& tgt_coords, const RigidTransform& gt,
                    double tau);

/// Resolves a correspondence's coordinates against a RegistrationResult's
/// stored geometry (superpoint/skeletal/dense kinds).
std::pair<Vec3, Vec3> resolve_correspondence(const RegistrationResult& result,
                                             const Correspondence& c);

}  // namespace spreg
