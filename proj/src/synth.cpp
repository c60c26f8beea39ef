#include "spreg/synth.hpp"

#include "spreg/cloud.hpp"
#include "spreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace spreg {

namespace {

constexpr double kPi = 3.14159265358979323846;

void add_point(std::vector<Vec3>& pts, const Vec3& p) { pts.push_back(p); }

void sample_ground(std::vector<Vec3>& pts, Xoshiro256& rng, int count,
                   double half_extent) {
  for (int i = 0; i < count; ++i) {
    const double x = rng.uniform(-half_extent, half_extent);
    const double y = rng.uniform(-half_extent, half_extent);
    const double z = 0.08 * std::sin(0.25 * x) * std::cos(0.2 * y) +
                     0.02 * rng.normal();
    add_point(pts, {x, y, z});
  }
}

void sample_box(std::vector<Vec3>& pts, Xoshiro256& rng, const Vec3& center,
                const Vec3& half, double yaw, int count) {
  const Mat3 rot =
      Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
  for (int i = 0; i < count; ++i) {
    // Pick a face, then a point on it.
    Vec3 local(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const int face = static_cast<int>(rng.below(5));  // no bottom face
    if (face == 0) local.z() = 1.0;
    else if (face == 1) local.x() = 1.0;
    else if (face == 2) local.x() = -1.0;
    else if (face == 3) local.y() = 1.0;
    else local.y() = -1.0;
    const Vec3 p = rot * local.cwiseProduct(half) + center;
    add_point(pts, {p.x(), p.y(), std::max(0.0, p.z() + half.z())});
  }
}

void sample_pole(std::vector<Vec3>& pts, Xoshiro256& rng, const Vec3& base,
                 double radius, double height, int count) {
  for (int i = 0; i < count; ++i) {
    const double a = rng.uniform(0, 2 * kPi);
    const double z = rng.uniform(0, height);
    add_point(pts, {base.x() + radius * std::cos(a),
                    base.y() + radius * std::sin(a), base.z() + z});
  }
}

void sample_blob(std::vector<Vec3>& pts, Xoshiro256& rng, const Vec3& center,
                 const Vec3& radii, int count) {
  for (int i = 0; i < count; ++i) {
    double u[3];
    rng.unit_vector(u);
    const double shell = 0.8 + 0.2 * rng.uniform();
    add_point(pts, {center.x() + radii.x() * u[0] * shell,
                    center.y() + radii.y() * u[1] * shell,
                    center.z() + radii.z() * u[2] * shell});
  }
}

PointCloud crop_random_halfspace(const PointCloud& cloud, double keep,
                                 Xoshiro256& rng) {
  if (keep >= 1.0) return cloud;
  double u[3];
  rng.unit_vector(u);
  const Vec3 dir(u[0], u[1], u[2]);
  Vector proj(cloud.size());
  for (Index i = 0; i < cloud.size(); ++i)
    proj(i) = dir.dot(Vec3(cloud.points.row(i)));
  std::vector<double> sorted(proj.data(), proj.data() + proj.size());
  const auto nth = static_cast<size_t>(
      std::min<double>(static_cast<double>(sorted.size()) - 1,
                       std::floor(keep * static_cast<double>(sorted.size()))));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(nth),
                   sorted.end());
  const double threshold = sorted[nth];

  std::vector<int> kept;
  for (Index i = 0; i < cloud.size(); ++i)
    if (proj(i) <= threshold) kept.push_back(static_cast<int>(i));

  PointCloud out;
  out.points.resize(static_cast<Index>(kept.size()), 3);
  if (cloud.has_attributes()) out.attributes.resize(static_cast<Index>(kept.size()));
  for (size_t i = 0; i < kept.size(); ++i) {
    out.points.row(static_cast<Index>(i)) = cloud.points.row(kept[i]);
    if (cloud.has_attributes())
      out.attributes[static_cast<Index>(i)] = cloud.attributes[kept[i]];
  }
  return out;
}

PointCloud add_noise(const PointCloud& cloud, double sigma, Xoshiro256& rng) {
  PointCloud out = cloud;
  if (sigma <= 0) return out;
  for (Index i = 0; i < out.size(); ++i)
    for (int c = 0; c < 3; ++c) out.points(i, c) += sigma * rng.normal();
  return out;
}

}  // namespace

PointCloud make_procedural_scene(std::uint64_t seed, int target_points) {
  Xoshiro256 rng(mix_seed(seed, 0x7363656e));  // scene stream
  std::vector<Vec3> pts;
  pts.reserve(static_cast<size_t>(target_points));

  const double half_extent = 15.0;
  const int ground = target_points * 2 / 5;
  sample_ground(pts, rng, ground, half_extent);

  const int n_boxes = 7 + static_cast<int>(rng.below(4));
  for (int b = 0; b < n_boxes; ++b) {
    const Vec3 center(rng.uniform(-12, 12), rng.uniform(-12, 12), 0.0);
    const Vec3 half(rng.uniform(0.6, 2.2), rng.uniform(0.6, 2.2),
                    rng.uniform(0.8, 2.0));
    sample_box(pts, rng, center, half, rng.uniform(0, kPi), target_points / 20);
  }

  const int n_poles = 10 + static_cast<int>(rng.below(5));
  for (int p = 0; p < n_poles; ++p) {
    const Vec3 base(rng.uniform(-13, 13), rng.uniform(-13, 13), 0.0);
    const double h = rng.uniform(2.0, 6.0);
    sample_pole(pts, rng, base, rng.uniform(0.12, 0.35), h, target_points / 60);
    if (rng.uniform() < 0.7)
      sample_blob(pts, rng, {base.x(), base.y(), h + 0.8},
                  {rng.uniform(0.8, 1.8), rng.uniform(0.8, 1.8),
                   rng.uniform(0.6, 1.2)},
                  target_points / 60);
  }

  while (static_cast<int>(pts.size()) < std::max(5000, target_points)) {
    const double x = rng.uniform(-half_extent, half_extent);
    const double y = rng.uniform(-half_extent, half_extent);
    add_point(pts, {x, y, 0.02 * rng.normal()});
  }

  PointCloud cloud;
  cloud.points.resize(static_cast<Index>(pts.size()), 3);
  for (size_t i = 0; i < pts.size(); ++i)
    cloud.points.row(static_cast<Index>(i)) = pts[i].transpose();
  return cloud;
}

TrainSample synth_cross_source(const PointCloud& base, std::uint64_t seed,
                               const ModelConfig& cfg) {
  if (base.size() < 5000)
    throw ParameterError("synth_cross_source: base cloud needs >= 5000 points, got " +
                         std::to_string(base.size()));

  Xoshiro256 rng(mix_seed(seed, 0x73796e74));  // pair stream

  const double yaw = rng.uniform(0.0, 2.0 * kPi);
  const double tilt = cfg.synth_tilt_deg * kPi / 180.0;
  const double pitch = rng.uniform(-tilt, tilt);
  const double roll = rng.uniform(-tilt, tilt);
  // Translation uniform in a ball via rejection.
  Vec3 t;
  do {
    t = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  } while (t.squaredNorm() > 1.0);
  t *= cfg.synth_translation;
  const RigidTransform gt = RigidTransform::from_yaw_pitch_roll(yaw, pitch, roll, t);

  const PointCloud src_full =
      add_noise(voxel_downsample(base, cfg.synth_voxel1), cfg.synth_noise1, rng);
  const PointCloud tgt_full = add_noise(
      voxel_downsample(apply_transform(base, gt), cfg.synth_voxel2),
      cfg.synth_noise2, rng);

  TrainSample sample;
  sample.gt = gt;

  for (int attempt = 0; attempt < 20; ++attempt) {
    PointCloud src = crop_random_halfspace(src_full, cfg.synth_keep1, rng);
    PointCloud tgt = crop_random_halfspace(tgt_full, cfg.synth_keep2, rng);
    const double ov = overlap_ratio(src, tgt, gt, cfg.overlap_tau);
    if (ov < 0.1) continue;

    if (cfg.synth_scale_jitter) {
      sample.scale = rng.uniform(0.98, 1.02);
      const Vec3 centroid = tgt.points.colwise().mean();
      tgt.points = ((tgt.points.rowwise() - centroid.transpose()) * sample.scale)
                       .rowwise() +
                   centroid.transpose();
    }
    sample.source = std::move(src);
    sample.target = std::move(tgt);
    sample.overlap = ov;
    return sample;
  }
  throw DegenerateInputError(
      "synth_cross_source: could not reach 0.1 overlap in 20 crop attempts");
}

}  // namespace spreg
