#pragma once

#include "spreg/backbone.hpp"
#include "spreg/config.hpp"
#include "spreg/skeleton.hpp"
#include "spreg/tensor.hpp"

namespace spreg {

/// entry 2i = sin(x / 10000^(2i/d)), entry 2i+1 = cos(...). d must be even.
Eigen::RowVectorXd sinusoidal_embed(double x, int d);

/// Angle between two vectors via atan2; defined as 0 when either vector is
/// shorter than 1e-12 (coincident points).
double vector_angle(const Vec3& u, const Vec3& v);

/// Pairwise structure embeddings for one cloud's token sequence
/// (superpoints followed by skeleton points). Pair (i, j) lives at row
/// i*L + j. Both embeddings carry their trainable projections; rho is the
/// per-token sum of distances to its k nearest skeleton points.
struct StructureEmbeddings {
  ad::Tensor r_p;  // (L*L) x d_t point-wise embedding
  ad::Tensor r_s;  // (L*L) x d_t skeleton-aware embedding
  Vector rho;      // L
};

/// Distance + angular embedding over token geometry (k nearest tokens of j,
/// self excluded). Rigid-transform invariant.
ad::Tensor compute_point_structure_embedding(const Points& positions,
                                             const ad::ParameterStore& params,
                                             const ModelConfig& cfg);

/// Skeleton-aware embedding: rho differences and angles to the k nearest
/// skeleton points of each token. Rigid-transform invariant.
struct SkeletonEmbedding {
  ad::Tensor r_s;
  Vector rho;
};
SkeletonEmbedding compute_skeleton_structure_embedding(
    const Points& positions, const Points& skeleton_points,
    const ad::ParameterStore& params, const ModelConfig& cfg);

struct SelfAttentionOut {
  ad::Tensor features;    // L x d_t (post residual/norm/feed-forward)
  ad::Tensor positional;  // L x d_t skeleton-aware positional encoding E'
  ad::Tensor scores;      // L x L attention weights (row-stochastic)
};

/// One skeleton-aware geometric self-attention block.
/// `prefix` selects the round, e.g. "encoder.r0.self".
SelfAttentionOut self_attention_layer(const ad::Tensor& x,
                                      const StructureEmbeddings& emb,
                                      const std::string& prefix,
                                      const ad::ParameterStore& params,
                                      const ModelConfig& cfg);

/// One skeleton-aware cross-attention block updating both clouds with
/// shared weights. `n_super_*` limits keys/values to the other cloud's
/// superpoint rows when cfg.cross_attention_full is false.
std::pair<ad::Tensor, ad::Tensor> cross_attention_layer(
    const ad::Tensor& x_p, const ad::Tensor& e_p, const ad::Tensor& x_q,
    const ad::Tensor& e_q, Index n_super_p, Index n_super_q,
    const std::string& prefix, const ad::ParameterStore& params,
    const ModelConfig& cfg);

struct HybridFeatures {
  ad::Tensor superpoint;  // |P_hat| x d_t
  ad::Tensor skeletal;    // N_s x d_t
};

void register_encoder_params(ad::ParameterStore& params, const ModelConfig& cfg,
                             Xoshiro256& rng);

/// N_t interleaved rounds of (self, self, cross) over the hybrid sequences
/// of both clouds. With rounds = 0 the inputs pass through unchanged.
std::pair<HybridFeatures, HybridFeatures> encode(const FeaturePyramid& pyr_p,
                                                 const Skeleton& skel_p,
                                                 const FeaturePyramid& pyr_q,
                                                 const Skeleton& skel_q,
                                                 const ad::ParameterStore& params,
                                                 const ModelConfig& cfg);

}  // namespace spreg
