#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <stdexcept>
#include <string>
#include <vector>

namespace spreg {

constexpr auto Dyn = Eigen::Dynamic;

// Row-major throughout: point clouds and feature matrices are row-per-item.
using Matrix = Eigen::Matrix<double, Dyn, Dyn, Eigen::RowMajor>;
using Points = Eigen::Matrix<double, Dyn, 3, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Error taxonomy. Typed so callers and tests can catch precisely.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid argument value (non-positive voxel size, odd embedding width, ...).
struct ParameterError : Error {
  using Error::Error;
};

/// Operation on an object in the wrong state (query on an empty index, ...).
struct StateError : Error {
  using Error::Error;
};

/// Incompatible tensor/matrix shapes; message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// Violated call contract (non-scalar loss, missing gradient, ...).
struct ContractError : Error {
  using Error::Error;
};

/// Input too degenerate to process (cloud collapses to < 4 superpoints, ...).
struct DegenerateInputError : Error {
  using Error::Error;
};

/// Geometry without enough rank to solve (collinear correspondences, ...).
struct DegenerateGeometryError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// Raised by training when too many samples had to be skipped.
struct EpochError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------

/// Point cloud: n x 3 positions in meters, optional per-point intensity.
struct PointCloud {
  Points points;          // n x 3
  Vector attributes;      // size 0 (absent) or n

  PointCloud() : points(0, 3) {}
  explicit PointCloud(Points pts) : points(std::move(pts)) {}
  PointCloud(Points pts, Vector attr)
      : points(std::move(pts)), attributes(std::move(attr)) {}

  Index size() const { return points.rows(); }
  bool empty() const { return points.rows() == 0; }
  bool has_attributes() const { return attributes.size() > 0; }

  /// True when every coordinate is finite and attribute sizes are consistent.
  bool valid() const {
    if (!points.allFinite()) return false;
    if (attributes.size() != 0 && attributes.size() != points.rows()) return false;
    if (attributes.size() != 0 && !attributes.allFinite()) return false;
    return true;
  }
};

/// Element of SE(3): x -> rotation * x + translation.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  /// this after other: (this * other)(x) = this(other(x)).
  RigidTransform compose(const RigidTransform& other) const {
    RigidTransform out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  /// Orthonormality and determinant check at the given tolerance.
  bool valid(double tol = 1e-9) const {
    const Mat3 gram = rotation.transpose() * rotation;
    if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    if (std::abs(rotation.determinant() - 1.0) > tol) return false;
    return translation.allFinite();
  }

  /// Nearest rotation in Frobenius norm (SVD projection onto SO(3)).
  RigidTransform orthonormalized() const;

  static RigidTransform from_yaw_pitch_roll(double yaw, double pitch, double roll,
                                            const Vec3& t = Vec3::Zero());
  static RigidTransform from_axis_angle(const Vec3& axis, double angle_rad,
                                        const Vec3& t = Vec3::Zero());
};

/// Coarse/dense correspondence tag; hybrid sets mix the first two.
enum class CorrKind : std::uint8_t { Superpoint = 0, Skeletal = 1, Dense = 2 };

struct Correspondence {
  int src = -1;       // index into the source item set (kind decides which set)
  int tgt = -1;
  double score = 0.0; // higher is better
  CorrKind kind = CorrKind::Superpoint;
  int group = -1;     // owning coarse pair for dense correspondences
};

using CorrespondenceSet = std::vector<Correspondence>;

inline const char* to_string(CorrKind k) {
  switch (k) {
    case CorrKind::Superpoint: return "superpoint";
    case CorrKind::Skeletal: return "skeletal";
    case CorrKind::Dense: return "dense";
  }
  return "?";
}

}  // namespace spreg
