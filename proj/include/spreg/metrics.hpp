#pragma once

#include "spreg/config.hpp"
#include "spreg/types.hpp"

#include <vector>

namespace spreg {

struct PairMetrics {
  double rre_deg = 0.0;
  double rte_m = 0.0;
  double inlier_ratio = 0.0;
  bool success = false;
};

/// RRE via the trace formula (degrees), RTE as the translation difference
/// norm, success against (cfg.rre_threshold_deg, cfg.rte_threshold_m), IR of
/// `corr` at radius cfg.tau_a given resolved coordinates.
PairMetrics compute_metrics(const RigidTransform& est, const RigidTransform& gt,
                            const CorrespondenceSet& corr,
                            const Points& src_coords, const Points& tgt_coords,
                            const ModelConfig& cfg);

double rotation_error_deg(const Mat3& r_est, const Mat3& r_gt);
double translation_error(const Vec3& t_est, const Vec3& t_gt);

/// Quaternion/atan2 angle extraction. The trace formula saturates around
/// 1e-6 degrees in double precision (acos amplifies last-ulp rounding of the
/// trace); exactness tests at tighter tolerances measure through this one.
double rotation_error_stable_deg(const Mat3& r_est, const Mat3& r_gt);

/// Fraction of GT-aligned source points whose nearest target neighbor lies
/// within tau.
double overlap_ratio(const PointCloud& src, const PointCloud& tgt,
                     const RigidTransform& gt, double tau);

struct MetricReport {
  std::vector<PairMetrics> per_pair;
  double registration_recall = 0.0;
  double mean_rre_successful = 0.0;  // over successful pairs
  double mean_rte_successful = 0.0;
  double mean_inlier_ratio = 0.0;    // over all pairs
  int failures = 0;                  // pairs that could not be evaluated

  void aggregate();
};

}  // namespace spreg
