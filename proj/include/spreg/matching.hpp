#pragma once

#include "spreg/backbone.hpp"
#include "spreg/cloud.hpp"
#include "spreg/config.hpp"
#include "spreg/types.hpp"

namespace spreg {

/// Rows scaled to unit length (numeric twin of ad::l2_normalize_rows).
Matrix l2_normalized_rows(const Matrix& x);

/// Gaussian correlation S_ij = exp(-||f_i - g_j||^2) followed by
/// dual-normalization (row-softmax times column-softmax, elementwise) and
/// top-`cap` selection. Features must be row-normalized upstream.
/// Ties fall back to (row, column) index order.
CorrespondenceSet coarse_match(const Matrix& f_src, const Matrix& f_tgt, int cap,
                               CorrKind kind);

/// M_ab = max(0, 1 - (delta_ab / sigma_c)^2) with
/// delta_ab = | ||p_a - p_b|| - ||q_a - q_b|| |; zero diagonal. The point
/// arrays are indexed by the correspondences' src/tgt indices.
Matrix build_compatibility(const CorrespondenceSet& corr, const Points& src_pts,
                           const Points& tgt_pts, double sigma_c);

/// Principal eigenvector by power iteration (100 iterations or relative
/// change < 1e-9), nonnegative for nonnegative matrices. Returns the zero
/// vector when the iterate vanishes.
Vector principal_eigenvector(const Matrix& m);

/// Iteratively removes correspondences conflicting with the maximum entry of
/// the principal eigenvector. Conflict rule "threshold": compatibility with
/// the anchor below cfg.tau_conflict; rule "one_to_one": shares an endpoint
/// with the anchor. Stops when the eigenvector vanishes, no conflicts
/// remain, or the retained set reaches min_cluster.
CorrespondenceSet spectral_denoise(const CorrespondenceSet& corr,
                                   const Matrix& compatibility, int min_cluster,
                                   const ModelConfig& cfg);

/// Replaces the n_replace least confident entries of `coarse` with the
/// n_topk best entries of the denoised skeletal set.
CorrespondenceSet hybrid_resample(const CorrespondenceSet& coarse,
                                  const CorrespondenceSet& skeletal_denoised,
                                  int n_replace, int n_topk);

/// Plain alternating row/column normalization of exp(scores); one iteration
/// is a row pass followed by a column pass. `scores` already includes the
/// slack row and column.
Matrix sinkhorn_normalize(const Matrix& scores, int iterations);

/// Dense correspondences with resolved coordinates. `group` on each entry is
/// the index of the owning coarse pair.
struct DenseMatches {
  CorrespondenceSet corr;
  Points src{0, 3};
  Points tgt{0, 3};
};

/// Patch-wise optimal-transport matching over the coarse set. Superpoint
/// pairs match their patches' dense features through Sinkhorn + mutual
/// top-k above cfg.tau_m; skeletal pairs contribute their skeleton points
/// as single-point evidence. Duplicate dense pairs keep the highest score.
DenseMatches dense_match(const FeaturePyramid& pyr_p, const FeaturePyramid& pyr_q,
                         const CorrespondenceSet& coarse,
                         const Points& skel_pts_p, const Points& skel_pts_q,
                         const ModelConfig& cfg);

struct LgrResult {
  RigidTransform transform;
  int inliers = 0;
  bool fallback = false;  // no candidate had >= 3 local correspondences
};

/// Local-to-global registration: per-coarse-pair Procrustes candidates
/// scored by global inlier count (residual < cfg.tau_a), best candidate
/// refined cfg.lgr_refine times on its inliers. Falls back to one global
/// solve when no candidate exists.
LgrResult local_to_global(const DenseMatches& dense, const ModelConfig& cfg);

}  // namespace spreg
