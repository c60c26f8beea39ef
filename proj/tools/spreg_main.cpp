#include "spreg/benchmark.hpp"
#include "spreg/cloud.hpp"
#include "spreg/config.hpp"
#include "spreg/io.hpp"
#include "spreg/matching.hpp"
#include "spreg/metrics.hpp"
#include "spreg/pipeline.hpp"
#include "spreg/synth.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace spreg;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

ModelConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ModelConfig{};
  return ModelConfig::load_file(path);
}

std::string resolve(const std::string& manifest_path, const std::string& entry) {
  const fs::path p(entry);
  if (p.is_absolute()) return entry;
  return (fs::path(manifest_path).parent_path() / p).string();
}

void print_transform(const RigidTransform& t) {
  const Mat3& r = t.rotation;
  const Vec3& tr = t.translation;
  std::printf("%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n",
              r(0, 0), r(0, 1), r(0, 2), tr(0), r(1, 0), r(1, 1), r(1, 2), tr(1),
              r(2, 0), r(2, 1), r(2, 2), tr(2));
}

Checkpoint load_and_check(const std::string& path, const ModelConfig& cfg) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.config_hash != cfg.hash())
    std::cerr << "warning: checkpoint config hash does not match the active "
                 "config; results may be inconsistent\n";
  return ck;
}

int cmd_synth(const std::string& base_path, int n_pairs, std::uint64_t seed,
              const std::string& out_dir, const std::string& config_path,
              double test_fraction) {
  const ModelConfig cfg = load_config_or_default(config_path);
  const PointCloud base = read_cloud(base_path);
  fs::create_directories(out_dir);

  std::vector<PairSpec> manifest;
  const int n_test = static_cast<int>(std::lround(test_fraction * n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    const TrainSample sample = synth_cross_source(base, seed + static_cast<std::uint64_t>(i), cfg);
    char name[64];
    std::snprintf(name, sizeof(name), "pair_%04d", i);
    const std::string src_rel = std::string(name) + "_src.ply";
    const std::string tgt_rel = std::string(name) + "_tgt.ply";
    write_ply(out_dir + "/" + src_rel, sample.source, true);
    write_ply(out_dir + "/" + tgt_rel, sample.target, true);
    PairSpec spec;
    spec.src_path = src_rel;
    spec.tgt_path = tgt_rel;
    spec.gt = sample.gt;
    spec.split = i >= n_pairs - n_test ? "test" : "train";
    spec.overlap = sample.overlap;
    manifest.push_back(std::move(spec));
  }
  write_manifest(out_dir + "/manifest.tsv", manifest);
  std::printf("wrote %d pairs (%d train, %d test) to %s\n", n_pairs,
              n_pairs - n_test, n_test, out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& data_dir, int epochs,
              const std::string& config_path, const std::string& out_path) {
  const ModelConfig cfg = load_config_or_default(config_path);
  const std::string manifest_path = data_dir + "/manifest.tsv";
  const auto pairs = read_manifest(manifest_path);

  std::vector<TrainSample> dataset;
  for (const auto& p : pairs) {
    if (p.split != "train") continue;
    TrainSample s;
    s.source = read_cloud(resolve(manifest_path, p.src_path));
    s.target = read_cloud(resolve(manifest_path, p.tgt_path));
    s.gt = p.gt;
    s.overlap = p.overlap;
    dataset.push_back(std::move(s));
  }
  if (dataset.empty()) throw StateError("train: no train-split pairs in manifest");

  ad::ParameterStore params = init_model_params(cfg);
  ad::AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  adam.weight_decay = cfg.weight_decay;
  adam.beta1 = cfg.adam_beta1;
  adam.beta2 = cfg.adam_beta2;
  adam.eps = cfg.adam_eps;
  Xoshiro256 rng(mix_seed(cfg.seed, 0x74726e));

  for (int e = 0; e < epochs; ++e) {
    const EpochMetrics m = train_epoch(dataset, params, adam, cfg, rng);
    std::printf("epoch %3d  reg_loss %s  skel_loss %s  coarse_ir %s  used %d  skipped %d\n",
                e + 1, num(m.mean_registration_loss).c_str(),
                num(m.mean_skeleton_loss).c_str(),
                num(m.mean_coarse_inlier_ratio).c_str(), m.samples_used,
                m.samples_skipped);
    std::fflush(stdout);
  }
  save_checkpoint(out_path, params, cfg.hash(), static_cast<std::uint32_t>(epochs),
                  rng.state());
  std::printf("saved checkpoint to %s\n", out_path.c_str());
  return 0;
}

int cmd_register(const std::string& src_path, const std::string& tgt_path,
                 const std::string& ckpt_path, const std::string& config_path,
                 const std::string& dump_corr, const std::string& gt_path) {
  const ModelConfig cfg = load_config_or_default(config_path);
  const Checkpoint ck = load_and_check(ckpt_path, cfg);
  const PointCloud src = read_cloud(src_path);
  const PointCloud tgt = read_cloud(tgt_path);

  const RegistrationResult res = register_clouds(src, tgt, ck.params, cfg);
  print_transform(res.transform);
  std::fprintf(stderr, "coarse %zu (skeletal %zu kept of %zu), dense %zu, lgr inliers %d%s\n",
               res.hybrid.size(), res.skeletal_denoised.size(),
               res.skeletal_raw.size(), res.dense.corr.size(), res.lgr_inliers,
               res.lgr_fallback ? " (fallback)" : "");
  for (const auto& [stage, ms] : res.timing_ms)
    std::fprintf(stderr, "  %s: %s ms\n", stage.c_str(), num(ms).c_str());

  bool have_gt = false;
  RigidTransform gt;
  if (!gt_path.empty()) {
    const auto poses = read_pose_file(gt_path);
    if (poses.empty()) throw IoError("empty GT pose file: " + gt_path);
    gt = poses.front();
    have_gt = true;
    const PairMetrics m =
        compute_metrics(res.transform, gt, {}, Points(0, 3), Points(0, 3), cfg);
    std::fprintf(stderr, "RRE %s deg, RTE %s m, %s\n", num(m.rre_deg).c_str(),
                 num(m.rte_m).c_str(), m.success ? "success" : "failure");
  }

  if (!dump_corr.empty()) {
    std::ofstream out(dump_corr);
    if (!out.good()) throw IoError("cannot write " + dump_corr);
    out << "kind,src_x,src_y,src_z,tgt_x,tgt_y,tgt_z,score,is_inlier_under_gt\n";
    auto dump_set = [&](const CorrespondenceSet& set) {
      for (const auto& c : set) {
        const auto [p, q] = resolve_correspondence(res, c);
        int inlier = -1;
        if (have_gt) inlier = (gt * p - q).norm() < cfg.tau_a ? 1 : 0;
        out << to_string(c.kind) << ',' << num(p.x()) << ',' << num(p.y()) << ','
            << num(p.z()) << ',' << num(q.x()) << ',' << num(q.y()) << ','
            << num(q.z()) << ',' << num(c.score) << ',' << inlier << '\n';
      }
    };
    dump_set(res.hybrid);
    dump_set(res.dense.corr);
  }
  return 0;
}

int cmd_eval(const std::string& pairs_path, const std::string& ckpt_path,
             const std::string& config_path, const std::string& out_dir,
             int workers, bool refine_gt) {
  const ModelConfig cfg = load_config_or_default(config_path);
  const Checkpoint ck = load_and_check(ckpt_path, cfg);
  auto pairs = read_manifest(pairs_path);
  for (auto& p : pairs) {
    p.src_path = resolve(pairs_path, p.src_path);
    p.tgt_path = resolve(pairs_path, p.tgt_path);
  }
  if (refine_gt) {
    for (auto& p : pairs) {
      const PointCloud src = read_cloud(p.src_path);
      const PointCloud tgt = read_cloud(p.tgt_path);
      p.gt = icp_refine(src, tgt, p.gt, cfg.icp_iters, cfg.icp_max_corr).transform;
    }
  }
  fs::create_directories(out_dir);
  const MetricReport report = run_benchmark(pairs, ck.params, cfg, out_dir, workers);
  std::printf("pairs %zu  failures %d  RR %s  mean RRE %s deg  mean RTE %s m  mean IR %s\n",
              pairs.size(), report.failures,
              num(report.registration_recall).c_str(),
              num(report.mean_rre_successful).c_str(),
              num(report.mean_rte_successful).c_str(),
              num(report.mean_inlier_ratio).c_str());
  return 0;
}

int cmd_skeleton(const std::string& src_path, const std::string& ckpt_path,
                 const std::string& config_path, const std::string& out_path) {
  const ModelConfig cfg = load_config_or_default(config_path);
  const Checkpoint ck = load_and_check(ckpt_path, cfg);
  const PointCloud cloud = read_cloud(src_path);

  const ad::ParameterStore frozen = ck.params.detached_copy();
  const FeaturePyramid pyr = extract_pyramid(cloud, frozen, cfg);
  const Skeleton skel =
      extract_skeleton(pyr.superpoints(), pyr.superpoint_features(), frozen, cfg);
  write_skeleton_ply(out_path, skel.points_value(), skel.radii_value());
  std::printf("wrote %lld skeleton points to %s\n",
              static_cast<long long>(skel.points.rows()), out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spreg: skeletal-prior point cloud registration"};
  app.require_subcommand(1);

  // synth
  std::string base_path, out_dir, config_path;
  int n_pairs = 16;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  auto* synth = app.add_subcommand("synth", "generate synthetic cross-source pairs");
  synth->add_option("--base", base_path, "base cloud (.ply or .bin)")->required();
  synth->add_option("--n-pairs", n_pairs, "number of pairs");
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--config", config_path, "config file");
  synth->add_option("--test-fraction", test_fraction, "fraction tagged test");

  // train
  std::string data_dir, ckpt_out;
  int epochs = 50;
  auto* train = app.add_subcommand("train", "train on a synthetic dataset");
  train->add_option("--data", data_dir, "dataset directory (with manifest.tsv)")->required();
  train->add_option("--epochs", epochs, "training epochs");
  train->add_option("--config", config_path, "config file");
  train->add_option("--out", ckpt_out, "output checkpoint")->required();

  // register
  std::string src_path, tgt_path, ckpt_path, dump_corr, gt_path;
  auto* reg = app.add_subcommand("register", "register one pair");
  reg->add_option("--src", src_path, "source cloud")->required();
  reg->add_option("--tgt", tgt_path, "target cloud")->required();
  reg->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  reg->add_option("--config", config_path, "config file");
  reg->add_option("--dump-corr", dump_corr, "write correspondence CSV");
  reg->add_option("--gt", gt_path, "GT pose file for inlier tagging");

  // eval
  std::string pairs_path;
  int workers = 0;
  bool refine_gt = false;
  auto* eval = app.add_subcommand("eval", "run the benchmark over a manifest");
  eval->add_option("--pairs", pairs_path, "pair manifest")->required();
  eval->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  eval->add_option("--config", config_path, "config file");
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_option("--workers", workers, "worker threads (0 = SPREG_THREADS or 1)");
  eval->add_flag("--refine-gt", refine_gt, "refine manifest GT with ICP first");

  // skeleton
  std::string skel_out;
  auto* skel = app.add_subcommand("skeleton", "export a cloud's skeleton as PLY");
  skel->add_option("--src", src_path, "input cloud")->required();
  skel->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  skel->add_option("--config", config_path, "config file");
  skel->add_option("--out", skel_out, "output PLY")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synth(base_path, n_pairs, seed, out_dir, config_path, test_fraction);
    if (train->parsed()) return cmd_train(data_dir, epochs, config_path, ckpt_out);
    if (reg->parsed())
      return cmd_register(src_path, tgt_path, ckpt_path, config_path, dump_corr, gt_path);
    if (eval->parsed())
      return cmd_eval(pairs_path, ckpt_path, config_path, out_dir, workers, refine_gt);
    if (skel->parsed())
      return cmd_skeleton(src_path, ckpt_path, config_path, skel_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
