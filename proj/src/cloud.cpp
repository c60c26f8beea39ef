#include "spreg/cloud.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

namespace spreg {

namespace {

struct VoxelKey {
  std::int64_t x, y, z;
  bool operator==(const VoxelKey& o) const {
    return x == o.x && y == o.y && z == o.z;
  }
  bool operator<(const VoxelKey& o) const {
    if (x != o.x) return x < o.x;
    if (y != o.y) return y < o.y;
    return z < o.z;
  }
};

// 21 bits per axis interleaved into a 63-bit Morton code. Used only for
// hashing; equality always compares the exact integer triple.
std::uint64_t morton63(const VoxelKey& k) {
  auto spread = [](std::uint64_t v) {
    v &= 0x1fffff;
    v = (v | v << 32) & 0x1f00000000ffffULL;
    v = (v | v << 16) & 0x1f0000ff0000ffULL;
    v = (v | v << 8) & 0x100f00f00f00f00fULL;
    v = (v | v << 4) & 0x10c30c30c30c30c3ULL;
    v = (v | v << 2) & 0x1249249249249249ULL;
    return v;
  };
  const std::uint64_t bias = 1ULL << 20;
  const std::uint64_t ux = (static_cast<std::uint64_t>(k.x) + bias) & 0x1fffff;
  const std::uint64_t uy = (static_cast<std::uint64_t>(k.y) + bias) & 0x1fffff;
  const std::uint64_t uz = (static_cast<std::uint64_t>(k.z) + bias) & 0x1fffff;
  return spread(ux) | (spread(uy) << 1) | (spread(uz) << 2);
}

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const {
    return static_cast<std::size_t>(morton63(k) * 0x9e3779b97f4a7c15ULL >> 1);
  }
};

}  // namespace

PointCloud voxel_downsample(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0))
    throw ParameterError("voxel_downsample: voxel_size must be > 0");
  if (cloud.empty()) return PointCloud{};

  struct Acc {
    Vec3 sum = Vec3::Zero();
    double attr = 0.0;
    int count = 0;
  };
  std::unordered_map<VoxelKey, Acc, VoxelKeyHash> cells;
  cells.reserve(static_cast<size_t>(cloud.size()));

  const bool has_attr = cloud.has_attributes();
  for (Index i = 0; i < cloud.size(); ++i) {
    const Vec3 p = cloud.points.row(i);
    const VoxelKey key{static_cast<std::int64_t>(std::floor(p.x() / voxel_size)),
                       static_cast<std::int64_t>(std::floor(p.y() / voxel_size)),
                       static_cast<std::int64_t>(std::floor(p.z() / voxel_size))};
    Acc& a = cells[key];
    a.sum += p;
    if (has_attr) a.attr += cloud.attributes[i];
    a.count += 1;
  }

  std::vector<std::pair<VoxelKey, Acc>> ordered(cells.begin(), cells.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  PointCloud out;
  out.points.resize(static_cast<Index>(ordered.size()), 3);
  if (has_attr) out.attributes.resize(static_cast<Index>(ordered.size()));
  for (Index i = 0; i < static_cast<Index>(ordered.size()); ++i) {
    const Acc& a = ordered[static_cast<size_t>(i)].second;
    out.points.row(i) = (a.sum / a.count).transpose();
    if (has_attr) out.attributes[i] = a.attr / a.count;
  }
  return out;
}

Points apply_transform(const Points& pts, const RigidTransform& T) {
  Points out(pts.rows(), 3);
  out = pts * T.rotation.transpose();
  out.rowwise() += T.translation.transpose();
  return out;
}

PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& T) {
  PointCloud out;
  out.points = apply_transform(cloud.points, T);
  out.attributes = cloud.attributes;
  return out;
}

RigidTransform RigidTransform::orthonormalized() const {
  Eigen::JacobiSVD<Mat3> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 R = svd.matrixU() * svd.matrixV().transpose();
  if (R.determinant() < 0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    R = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  RigidTransform out;
  out.rotation = R;
  out.translation = translation;
  return out;
}

RigidTransform RigidTransform::from_yaw_pitch_roll(double yaw, double pitch,
                                                   double roll, const Vec3& t) {
  RigidTransform out;
  out.rotation = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                  Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                  Eigen::AngleAxisd(roll, Vec3::UnitX()))
                     .toRotationMatrix();
  out.translation = t;
  return out;
}

RigidTransform RigidTransform::from_axis_angle(const Vec3& axis, double angle_rad,
                                               const Vec3& t) {
  RigidTransform out;
  out.rotation = Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
  out.translation = t;
  return out;
}

RigidTransform weighted_procrustes(const Points& src, const Points& tgt,
                                   const Vector& weights) {
  const Index n = src.rows();
  if (n < 3)
    throw ContractError("weighted_procrustes: need at least 3 correspondences");
  if (tgt.rows() != n || weights.size() != n)
    throw ShapeError("weighted_procrustes: src " + std::to_string(n) +
                     "x3 vs tgt " + std::to_string(tgt.rows()) + "x3, weights " +
                     std::to_string(weights.size()));
  const double wsum = weights.sum();
  if (!(wsum > 0.0))
    throw ContractError("weighted_procrustes: weights must sum to > 0");

  const Vector w = weights / wsum;
  const Vec3 src_mean = (src.transpose() * w);
  const Vec3 tgt_mean = (tgt.transpose() * w);

  const Points src_c = src.rowwise() - src_mean.transpose();
  const Points tgt_c = tgt.rowwise() - tgt_mean.transpose();
  const Mat3 cov = src_c.transpose() * w.asDiagonal() * tgt_c;

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (sv(1) <= 1e-12 * std::max(sv(0), 1e-300))
    throw DegenerateGeometryError(
        "weighted_procrustes: cross-covariance rank < 2");

  Mat3 S = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0)
    S(2, 2) = -1.0;

  RigidTransform T;
  T.rotation = svd.matrixV() * S * svd.matrixU().transpose();
  T.translation = tgt_mean - T.rotation * src_mean;
  return T;
}

IcpResult icp_refine(const PointCloud& source, const PointCloud& target,
                     const RigidTransform& init, int max_iters,
                     double max_corr_dist) {
  if (source.empty() || target.empty())
    throw StateError("icp_refine: clouds must be non-empty");
  if (max_corr_dist <= 0.0)
    throw ParameterError("icp_refine: max_corr_dist must be > 0");

  const SpatialIndex index(target);
  IcpResult result;
  RigidTransform current = init;   // candidate being evaluated
  RigidTransform accepted = init;  // last transform whose residual was accepted

  double prev_residual = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    const Points moved = apply_transform(source.points, current);
    std::vector<int> src_idx, tgt_idx;
    src_idx.reserve(static_cast<size_t>(moved.rows()));
    double residual = 0.0;
    for (Index i = 0; i < moved.rows(); ++i) {
      const auto [j, d] = index.nearest(moved.row(i));
      if (d <= max_corr_dist) {
        src_idx.push_back(static_cast<int>(i));
        tgt_idx.push_back(j);
        residual += d;
      }
    }
    if (src_idx.empty()) {
      result.transform = init;
      result.no_progress = true;
      return result;
    }
    residual /= static_cast<double>(src_idx.size());

    if (residual > prev_residual) {
      current = accepted;  // last update made things worse; revert it
      break;
    }
    accepted = current;
    result.residual = residual;
    result.residual_history.push_back(residual);
    result.iterations = iter + 1;

    const bool converged =
        std::isfinite(prev_residual) &&
        std::abs(prev_residual - residual) <= 1e-6 * std::max(residual, 1e-12);
    prev_residual = residual;
    if (converged || src_idx.size() < 3) break;

    Points src_m(static_cast<Index>(src_idx.size()), 3);
    Points tgt_m(static_cast<Index>(src_idx.size()), 3);
    for (size_t r = 0; r < src_idx.size(); ++r) {
      src_m.row(static_cast<Index>(r)) = source.points.row(src_idx[r]);
      tgt_m.row(static_cast<Index>(r)) = target.points.row(tgt_idx[r]);
    }
    try {
      current = weighted_procrustes(
          src_m, tgt_m, Vector::Ones(static_cast<Index>(src_idx.size())));
    } catch (const DegenerateGeometryError&) {
      current = accepted;
      break;
    }
  }
  result.transform = current;
  return result;
}

}  // namespace spreg
