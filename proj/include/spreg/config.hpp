#pragma once

#include "spreg/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace spreg {

/// Every tunable of the model, matching, losses, training, synthesis and
/// evaluation. Flat `key = value` text files; '#' starts a comment; unknown
/// keys are errors.
struct ModelConfig {
  // global
  std::uint64_t seed = 7;

  // backbone
  std::vector<double> backbone_voxels = {0.3, 0.6, 1.2, 2.4};
  std::vector<int> backbone_widths = {64, 64, 128, 256};
  int backbone_knn = 16;
  int dense_level = 1;
  int n_patch = 64;

  // skeleton extraction
  int n_skeleton = 64;        // N_s
  double lambda1 = 0.3;       // weight of the point-to-sphere loss
  double lambda2 = 0.4;       // weight of the radius regularizer
  int sphere_samples = 8;     // samples per medial sphere in the sampling loss

  // encoder
  int d_t = 256;              // superpoint/skeleton feature width
  int rounds = 3;             // N_t interleaves of self- and cross-attention
  int knn_embed = 3;          // k for both structure embeddings
  double sigma_d = 4.8;       // distance sensitivity, point-wise (m)
  double sigma_a_deg = 15.0;  // angular sensitivity, point-wise (deg)
  double sigma_d_skel = 4.8;  // skeleton-wise distance sensitivity (m)
  double sigma_a_skel_deg = 15.0;
  int attention_heads = 1;
  bool cross_attention_full = true;  // keys/values span the hybrid sequence

  // correspondence sampling
  int n_coarse = 128;         // N_c
  int n_replace = 32;
  int n_topk_skeletal = 16;   // N_k
  double sigma_c = 0.6;       // compatibility scale (m)
  double tau_conflict = 0.5;
  int min_cluster = 3;
  std::string denoise_rule = "threshold";  // or "one_to_one"

  // dense matching / LGR
  int sinkhorn_iters = 100;
  int mutual_topk = 3;
  double tau_m = 0.05;
  double tau_a = 0.6;         // inlier / GT-match radius (m)
  int lgr_refine = 5;         // N_r

  // losses
  double circle_margin_pos = 0.1;
  double circle_margin_neg = 1.4;
  double circle_beta = 10.0;
  double overlap_floor = 0.1;
  int loss_patch_pairs = 32;

  // training
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool alternate_losses = false;  // default: joint step with blocked gradients

  // metrics / evaluation
  double rre_threshold_deg = 5.0;
  double rte_threshold_m = 2.0;
  double overlap_tau = 0.6;

  // ICP ground-truth refinement
  int icp_iters = 50;
  double icp_max_corr = 1.0;

  // synthetic cross-source generator
  double synth_voxel1 = 0.3;
  double synth_voxel2 = 0.45;
  double synth_noise1 = 0.01;
  double synth_noise2 = 0.02;
  double synth_keep1 = 0.85;
  double synth_keep2 = 0.85;
  bool synth_scale_jitter = false;
  double synth_translation = 5.0;
  double synth_tilt_deg = 2.0;

  int levels() const { return static_cast<int>(backbone_voxels.size()); }
  int superpoint_level() const { return levels() - 1; }
  int d_dense() const { return backbone_widths[static_cast<size_t>(dense_level)]; }
  double sigma_a() const;       // radians
  double sigma_a_skel() const;  // radians

  /// Throws ConfigError when any invariant is violated (counts >= 1,
  /// sensitivities > 0, N_k <= N_replace <= N_c, ...).
  void validate() const;

  /// Canonical `key = value` text, keys sorted, 17 significant digits.
  std::string serialize() const;
  /// FNV-1a over the canonical serialization.
  std::uint64_t hash() const;

  static ModelConfig parse(const std::string& text);
  static ModelConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;

  /// GermanyForest3D-style thresholds (0.5 deg / 0.3 m).
  static ModelConfig forest_preset();
  /// Small sizes for fast CPU-only experiments.
  static ModelConfig toy_preset();
};

}  // namespace spreg
