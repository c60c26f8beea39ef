#pragma once

#include "spreg/kdtree.hpp"
#include "spreg/types.hpp"

#include <optional>

namespace spreg {

/// One output point per non-empty voxel, at the centroid of the points in
/// that voxel. Attributes are averaged. Output rows are ordered by the
/// integer voxel cell (x, y, z lexicographic) so the result is independent
/// of input ordering.
PointCloud voxel_downsample(const PointCloud& cloud, double voxel_size);

/// rotation * p + translation applied to every point; attributes preserved.
PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& T);
Points apply_transform(const Points& pts, const RigidTransform& T);

/// Weighted least-squares rigid alignment (closed form via SVD), solving
/// min_T sum_i w_i ||T(src_i) - tgt_i||^2 with det(R) = +1 enforced.
/// Throws DegenerateGeometryError when the weighted cross-covariance has
/// rank < 2 (collinear or coincident geometry).
RigidTransform weighted_procrustes(const Points& src, const Points& tgt,
                                   const Vector& weights);

struct IcpResult {
  RigidTransform transform;
  bool no_progress = false;  // no correspondence found within max_corr_dist
  int iterations = 0;
  double residual = 0.0;     // mean closest-point distance at the last accept
  std::vector<double> residual_history;
};

/// Point-to-point ICP from an initial guess. The mean residual over accepted
/// iterations is non-increasing; iteration stops at max_iters, when the
/// relative residual change drops below 1e-6, or when an update would
/// increase the residual.
IcpResult icp_refine(const PointCloud& source, const PointCloud& target,
                     const RigidTransform& init, int max_iters = 50,
                     double max_corr_dist = 1.0);

}  // namespace spreg
