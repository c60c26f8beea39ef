#include "spreg/benchmark.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <thread>

namespace spreg {

namespace {

std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct PairResult {
  bool failed = false;
  std::string error;
  PairMetrics metrics;
  double overlap = -1.0;
  double ir_superpoint = 0.0;
  double ir_skeletal_raw = 0.0;
  double ir_skeletal_denoised = 0.0;
  double ir_hybrid = 0.0;
  int n_dense = 0;
  int lgr_inliers = 0;
};

double set_inlier_ratio(const RegistrationResult& r, const CorrespondenceSet& corr,
                        const RigidTransform& gt, double tau) {
  if (corr.empty()) return 0.0;
  int inl = 0;
  for (const auto& c : corr) {
    const auto [p, q] = resolve_correspondence(r, c);
    if ((gt * p - q).norm() < tau) ++inl;
  }
  return static_cast<double>(inl) / static_cast<double>(corr.size());
}

PairResult evaluate_pair(const PairSpec& pair, const ad::ParameterStore& params,
                         const ModelConfig& cfg) {
  PairResult out;
  try {
    const PointCloud src = read_cloud(pair.src_path);
    const PointCloud tgt = read_cloud(pair.tgt_path);
    const RegistrationResult r = register_clouds(src, tgt, params, cfg);

    out.metrics = compute_metrics(r.transform, pair.gt, {}, Points(0, 3),
                                  Points(0, 3), cfg);
    out.ir_superpoint = set_inlier_ratio(r, r.superpoint_corr, pair.gt, cfg.tau_a);
    out.ir_skeletal_raw = set_inlier_ratio(r, r.skeletal_raw, pair.gt, cfg.tau_a);
    out.ir_skeletal_denoised =
        set_inlier_ratio(r, r.skeletal_denoised, pair.gt, cfg.tau_a);
    out.ir_hybrid = set_inlier_ratio(r, r.hybrid, pair.gt, cfg.tau_a);
    out.metrics.inlier_ratio = out.ir_hybrid;
    out.n_dense = static_cast<int>(r.dense.corr.size());
    out.lgr_inliers = r.lgr_inliers;
    out.overlap = pair.overlap >= 0
                      ? pair.overlap
                      : overlap_ratio(src, tgt, pair.gt, cfg.overlap_tau);
  } catch (const std::exception& e) {
    out.failed = true;
    out.error = e.what();
  }
  return out;
}

int effective_workers(int workers) {
  if (workers > 0) return workers;
  if (const char* env = std::getenv("SPREG_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

}  // namespace

MetricReport run_benchmark(const std::vector<PairSpec>& pairs,
                           const ad::ParameterStore& params,
                           const ModelConfig& cfg, const std::string& out_dir,
                           int workers) {
  std::vector<PairResult> results(pairs.size());
  const int n_workers =
      std::min<int>(effective_workers(workers),
                    std::max<int>(1, static_cast<int>(pairs.size())));

  if (n_workers <= 1) {
    for (size_t i = 0; i < pairs.size(); ++i)
      results[i] = evaluate_pair(pairs[i], params, cfg);
  } else {
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      while (true) {
        const size_t i = next.fetch_add(1);
        if (i >= pairs.size()) break;
        results[i] = evaluate_pair(pairs[i], params, cfg);
      }
    };
    std::vector<std::thread> threads;
    for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  MetricReport report;
  for (const auto& r : results) {
    if (r.failed)
      ++report.failures;
    else
      report.per_pair.push_back(r.metrics);
  }
  report.aggregate();

  // --- per_pair.csv ---
  {
    std::ofstream out(out_dir + "/per_pair.csv");
    if (!out.good()) throw IoError("cannot write " + out_dir + "/per_pair.csv");
    out << "pair,src,tgt,split,overlap,rre_deg,rte_m,success,ir_hybrid,"
           "ir_superpoint,ir_skeletal_raw,ir_skeletal_denoised,n_dense,"
           "lgr_inliers,failed\n";
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto& r = results[i];
      out << i << ',' << pairs[i].src_path << ',' << pairs[i].tgt_path << ','
          << pairs[i].split << ',' << csv_num(r.overlap) << ','
          << csv_num(r.metrics.rre_deg) << ',' << csv_num(r.metrics.rte_m) << ','
          << (r.metrics.success ? 1 : 0) << ',' << csv_num(r.ir_hybrid) << ','
          << csv_num(r.ir_superpoint) << ',' << csv_num(r.ir_skeletal_raw) << ','
          << csv_num(r.ir_skeletal_denoised) << ',' << r.n_dense << ','
          << r.lgr_inliers << ',' << (r.failed ? 1 : 0) << '\n';
    }
  }

  // --- rr_sweep.csv ---
  {
    std::ofstream out(out_dir + "/rr_sweep.csv");
    if (!out.good()) throw IoError("cannot write " + out_dir + "/rr_sweep.csv");
    out << "rre_threshold_deg,rte_threshold_m,rr\n";
    const int total = static_cast<int>(pairs.size());
    for (int ri = 1; ri <= 20; ++ri) {
      const double rre_t = 0.5 * ri;
      for (int ti = 1; ti <= 20; ++ti) {
        const double rte_t = 0.25 * ti;
        int succ = 0;
        for (const auto& r : results)
          if (!r.failed && r.metrics.rre_deg < rre_t && r.metrics.rte_m < rte_t)
            ++succ;
        const double rr = total > 0 ? static_cast<double>(succ) / total : 0.0;
        out << csv_num(rre_t) << ',' << csv_num(rte_t) << ',' << csv_num(rr)
            << '\n';
      }
    }
  }

  // --- overlap_bins.csv ---
  {
    std::ofstream out(out_dir + "/overlap_bins.csv");
    if (!out.good()) throw IoError("cannot write " + out_dir + "/overlap_bins.csv");
    out << "bin_lo,bin_hi,n_pairs,rr,mean_ir\n";
    for (int b = 0; b < 10; ++b) {
      const double lo = 0.1 * b, hi = 0.1 * (b + 1);
      int n = 0, succ = 0;
      double ir = 0.0;
      for (const auto& r : results) {
        if (r.failed || r.overlap < 0) continue;
        const bool in_bin = r.overlap >= lo && (b == 9 ? r.overlap <= hi + 1e-12
                                                       : r.overlap < hi);
        if (!in_bin) continue;
        ++n;
        if (r.metrics.success) ++succ;
        ir += r.ir_hybrid;
      }
      out << csv_num(lo) << ',' << csv_num(hi) << ',' << n << ','
          << csv_num(n > 0 ? static_cast<double>(succ) / n : 0.0) << ','
          << csv_num(n > 0 ? ir / n : 0.0) << '\n';
    }
  }

  return report;
}

}  // namespace spreg
