#include "spreg/metrics.hpp"

#include "spreg/kdtree.hpp"

#include <algorithm>
#include <cmath>

namespace spreg {

namespace {
constexpr double kRadToDeg = 57.29577951308232087680;
}

double rotation_error_deg(const Mat3& r_est, const Mat3& r_gt) {
  const double c = ((r_gt.transpose() * r_est).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0)) * kRadToDeg;
}

double translation_error(const Vec3& t_est, const Vec3& t_gt) {
  return (t_est - t_gt).norm();
}

double rotation_error_stable_deg(const Mat3& r_est, const Mat3& r_gt) {
  const Eigen::Quaterniond q(Mat3(r_gt.transpose() * r_est));
  return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w())) * kRadToDeg;
}

PairMetrics compute_metrics(const RigidTransform& est, const RigidTransform& gt,
                            const CorrespondenceSet& corr,
                            const Points& src_coords, const Points& tgt_coords,
                            const ModelConfig& cfg) {
  PairMetrics m;
  m.rre_deg = rotation_error_deg(est.rotation, gt.rotation);
  m.rte_m = translation_error(est.translation, gt.translation);
  m.success = m.rre_deg < cfg.rre_threshold_deg && m.rte_m < cfg.rte_threshold_m;

  if (!corr.empty()) {
    int inliers = 0;
    for (const auto& c : corr) {
      const Vec3 p = src_coords.row(c.src);
      const Vec3 q = tgt_coords.row(c.tgt);
      if ((gt * p - q).norm() < cfg.tau_a) ++inliers;
    }
    m.inlier_ratio = static_cast<double>(inliers) / static_cast<double>(corr.size());
  }
  return m;
}

double overlap_ratio(const PointCloud& src, const PointCloud& tgt,
                     const RigidTransform& gt, double tau) {
  if (tau <= 0) throw ParameterError("overlap_ratio: tau must be > 0");
  if (src.empty() || tgt.empty()) return 0.0;
  const SpatialIndex index(tgt);
  int within = 0;
  for (Index i = 0; i < src.size(); ++i) {
    const Vec3 moved = gt * Vec3(src.points.row(i));
    if (index.nearest(moved).second <= tau) ++within;
  }
  return static_cast<double>(within) / static_cast<double>(src.size());
}

void MetricReport::aggregate() {
  registration_recall = 0.0;
  mean_rre_successful = 0.0;
  mean_rte_successful = 0.0;
  mean_inlier_ratio = 0.0;
  int successes = 0;
  for (const auto& m : per_pair) {
    if (m.success) {
      ++successes;
      mean_rre_successful += m.rre_deg;
      mean_rte_successful += m.rte_m;
    }
    mean_inlier_ratio += m.inlier_ratio;
  }
  const int total = static_cast<int>(per_pair.size()) + failures;
  if (total > 0)
    registration_recall = static_cast<double>(successes) / total;
  if (successes > 0) {
    mean_rre_successful /= successes;
    mean_rte_successful /= successes;
  }
  if (!per_pair.empty()) mean_inlier_ratio /= static_cast<double>(per_pair.size());
}

}  // namespace spreg
