#pragma once

#include "spreg/types.hpp"

#include <string>
#include <vector>

namespace spreg {

/// KITTI velodyne binary scan: little-endian float32 quadruples
/// (x, y, z, reflectance), no header. File length must be a multiple of 16.
PointCloud read_kitti_bin(const std::string& path);
void write_kitti_bin(const std::string& path, const PointCloud& cloud);

/// PLY with float32 x/y/z and an optional float32 intensity property.
/// Reads ascii and binary_little_endian; unknown vertex properties are
/// skipped. `binary` selects the output format.
PointCloud read_ply(const std::string& path);
void write_ply(const std::string& path, const PointCloud& cloud,
               bool binary = true);

/// PLY with per-vertex float32 radius (skeleton export).
void write_skeleton_ply(const std::string& path, const Points& points,
                        const Vector& radii, bool binary = false);

/// KITTI pose file: one 3x4 row-major matrix (12 decimals) per line.
std::vector<RigidTransform> read_pose_file(const std::string& path);
void write_pose_file(const std::string& path,
                     const std::vector<RigidTransform>& poses);

/// Dispatch on extension: .bin -> KITTI binary, anything else -> PLY.
PointCloud read_cloud(const std::string& path);

/// One registration pair of a dataset manifest.
struct PairSpec {
  std::string src_path;
  std::string tgt_path;
  RigidTransform gt;
  std::string split;       // train | val | test
  double overlap = -1.0;   // filled when known, else -1
};

/// Tab-separated manifest: src, tgt, 12 GT numbers (row-major 3x4), split tag,
/// optionally followed by the overlap ratio.
std::vector<PairSpec> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<PairSpec>& pairs);

}  // namespace spreg
