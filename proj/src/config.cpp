#include "spreg/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace spreg {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(trim(tok));
  return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected bool, got '" + v + "'");
}

// Field registry: one place defining serialization and parsing per key.
struct Field {
  std::function<std::string(const ModelConfig&)> to_string;
  std::function<void(ModelConfig&, const std::string&)> from_string;
};

std::map<std::string, Field> field_registry() {
  std::map<std::string, Field> f;
  auto add_u64 = [&](const std::string& k, std::uint64_t ModelConfig::* m) {
    f[k] = {[m](const ModelConfig& c) { return std::to_string(c.*m); },
            [m, k](ModelConfig& c, const std::string& v) {
              c.*m = std::stoull(v);
            }};
  };
  auto add_int = [&](const std::string& k, int ModelConfig::* m) {
    f[k] = {[m](const ModelConfig& c) { return std::to_string(c.*m); },
            [m](ModelConfig& c, const std::string& v) { c.*m = std::stoi(v); }};
  };
  auto add_dbl = [&](const std::string& k, double ModelConfig::* m) {
    f[k] = {[m](const ModelConfig& c) { return fmt_double(c.*m); },
            [m](ModelConfig& c, const std::string& v) { c.*m = std::stod(v); }};
  };
  auto add_bool = [&](const std::string& k, bool ModelConfig::* m) {
    f[k] = {[m](const ModelConfig& c) { return c.*m ? "true" : "false"; },
            [m, k](ModelConfig& c, const std::string& v) {
              c.*m = parse_bool(v, k);
            }};
  };
  auto add_str = [&](const std::string& k, std::string ModelConfig::* m) {
    f[k] = {[m](const ModelConfig& c) { return c.*m; },
            [m](ModelConfig& c, const std::string& v) { c.*m = v; }};
  };

  add_u64("seed", &ModelConfig::seed);
  f["backbone_voxels"] = {
      [](const ModelConfig& c) {
        std::string s;
        for (size_t i = 0; i < c.backbone_voxels.size(); ++i)
          s += (i ? "," : "") + fmt_double(c.backbone_voxels[i]);
        return s;
      },
      [](ModelConfig& c, const std::string& v) {
        c.backbone_voxels.clear();
        for (const auto& t : split_commas(v))
          c.backbone_voxels.push_back(std::stod(t));
      }};
  f["backbone_widths"] = {
      [](const ModelConfig& c) {
        std::string s;
        for (size_t i = 0; i < c.backbone_widths.size(); ++i)
          s += (i ? "," : "") + std::to_string(c.backbone_widths[i]);
        return s;
      },
      [](ModelConfig& c, const std::string& v) {
        c.backbone_widths.clear();
        for (const auto& t : split_commas(v))
          c.backbone_widths.push_back(std::stoi(t));
      }};
  add_int("backbone_knn", &ModelConfig::backbone_knn);
  add_int("dense_level", &ModelConfig::dense_level);
  add_int("n_patch", &ModelConfig::n_patch);
  add_int("n_skeleton", &ModelConfig::n_skeleton);
  add_dbl("lambda1", &ModelConfig::lambda1);
  add_dbl("lambda2", &ModelConfig::lambda2);
  add_int("sphere_samples", &ModelConfig::sphere_samples);
  add_int("d_t", &ModelConfig::d_t);
  add_int("rounds", &ModelConfig::rounds);
  add_int("knn_embed", &ModelConfig::knn_embed);
  add_dbl("sigma_d", &ModelConfig::sigma_d);
  add_dbl("sigma_a_deg", &ModelConfig::sigma_a_deg);
  add_dbl("sigma_d_skel", &ModelConfig::sigma_d_skel);
  add_dbl("sigma_a_skel_deg", &ModelConfig::sigma_a_skel_deg);
  add_int("attention_heads", &ModelConfig::attention_heads);
  add_bool("cross_attention_full", &ModelConfig::cross_attention_full);
  add_int("n_coarse", &ModelConfig::n_coarse);
  add_int("n_replace", &ModelConfig::n_replace);
  add_int("n_topk_skeletal", &ModelConfig::n_topk_skeletal);
  add_dbl("sigma_c", &ModelConfig::sigma_c);
  add_dbl("tau_conflict", &ModelConfig::tau_conflict);
  add_int("min_cluster", &ModelConfig::min_cluster);
  add_str("denoise_rule", &ModelConfig::denoise_rule);
  add_int("sinkhorn_iters", &ModelConfig::sinkhorn_iters);
  add_int("mutual_topk", &ModelConfig::mutual_topk);
  add_dbl("tau_m", &ModelConfig::tau_m);
  add_dbl("tau_a", &ModelConfig::tau_a);
  add_int("lgr_refine", &ModelConfig::lgr_refine);
  add_dbl("circle_margin_pos", &ModelConfig::circle_margin_pos);
  add_dbl("circle_margin_neg", &ModelConfig::circle_margin_neg);
  add_dbl("circle_beta", &ModelConfig::circle_beta);
  add_dbl("overlap_floor", &ModelConfig::overlap_floor);
  add_int("loss_patch_pairs", &ModelConfig::loss_patch_pairs);
  add_dbl("learning_rate", &ModelConfig::learning_rate);
  add_dbl("weight_decay", &ModelConfig::weight_decay);
  add_dbl("adam_beta1", &ModelConfig::adam_beta1);
  add_dbl("adam_beta2", &ModelConfig::adam_beta2);
  add_dbl("adam_eps", &ModelConfig::adam_eps);
  add_bool("alternate_losses", &ModelConfig::alternate_losses);
  add_dbl("rre_threshold_deg", &ModelConfig::rre_threshold_deg);
  add_dbl("rte_threshold_m", &ModelConfig::rte_threshold_m);
  add_dbl("overlap_tau", &ModelConfig::overlap_tau);
  add_int("icp_iters", &ModelConfig::icp_iters);
  add_dbl("icp_max_corr", &ModelConfig::icp_max_corr);
  add_dbl("synth_voxel1", &ModelConfig::synth_voxel1);
  add_dbl("synth_voxel2", &ModelConfig::synth_voxel2);
  add_dbl("synth_noise1", &ModelConfig::synth_noise1);
  add_dbl("synth_noise2", &ModelConfig::synth_noise2);
  add_dbl("synth_keep1", &ModelConfig::synth_keep1);
  add_dbl("synth_keep2", &ModelConfig::synth_keep2);
  add_bool("synth_scale_jitter", &ModelConfig::synth_scale_jitter);
  add_dbl("synth_translation", &ModelConfig::synth_translation);
  add_dbl("synth_tilt_deg", &ModelConfig::synth_tilt_deg);
  return f;
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = field_registry();
  return f;
}

}  // namespace

double ModelConfig::sigma_a() const { return sigma_a_deg * kPi / 180.0; }
double ModelConfig::sigma_a_skel() const {
  return sigma_a_skel_deg * kPi / 180.0;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  need(!backbone_voxels.empty(), "backbone_voxels must not be empty");
  need(backbone_voxels.size() == backbone_widths.size(),
       "backbone_voxels and backbone_widths must have the same length");
  for (double v : backbone_voxels) need(v > 0, "backbone voxel sizes must be > 0");
  for (size_t i = 1; i < backbone_voxels.size(); ++i)
    need(backbone_voxels[i] > backbone_voxels[i - 1],
         "backbone voxel sizes must increase");
  for (int w : backbone_widths) need(w >= 1, "backbone widths must be >= 1");
  need(dense_level >= 0 && dense_level < levels(), "dense_level out of range");
  need(backbone_knn >= 1, "backbone_knn must be >= 1");
  need(n_patch >= 1, "n_patch must be >= 1");
  need(n_skeleton >= 1, "n_skeleton must be >= 1");
  need(sphere_samples >= 1, "sphere_samples must be >= 1");
  need(d_t >= 2 && d_t % 2 == 0, "d_t must be even and >= 2");
  need(backbone_widths.back() == d_t,
       "last backbone width must equal d_t");
  need(rounds >= 0, "rounds must be >= 0");
  need(knn_embed >= 1, "knn_embed must be >= 1");
  need(knn_embed <= n_skeleton, "knn_embed must be <= n_skeleton");
  need(sigma_d > 0 && sigma_a_deg > 0 && sigma_d_skel > 0 && sigma_a_skel_deg > 0,
       "sensitivities must be > 0");
  need(attention_heads == 1, "only single-head attention is implemented");
  need(n_coarse >= 1, "n_coarse must be >= 1");
  need(n_replace >= 0, "n_replace must be >= 0");
  need(n_topk_skeletal >= 0, "n_topk_skeletal must be >= 0");
  need(n_topk_skeletal <= n_replace && n_replace <= n_coarse,
       "require n_topk_skeletal <= n_replace <= n_coarse");
  need(sigma_c > 0, "sigma_c must be > 0");
  need(tau_conflict >= 0 && tau_conflict <= 1, "tau_conflict must be in [0,1]");
  need(min_cluster >= 1, "min_cluster must be >= 1");
  need(denoise_rule == "threshold" || denoise_rule == "one_to_one",
       "denoise_rule must be 'threshold' or 'one_to_one'");
  need(sinkhorn_iters >= 1, "sinkhorn_iters must be >= 1");
  need(mutual_topk >= 1, "mutual_topk must be >= 1");
  need(tau_m >= 0 && tau_m <= 1, "tau_m must be in [0,1]");
  need(tau_a > 0, "tau_a must be > 0");
  need(lgr_refine >= 0, "lgr_refine must be >= 0");
  need(circle_beta > 0, "circle_beta must be > 0");
  need(overlap_floor >= 0 && overlap_floor < 1, "overlap_floor must be in [0,1)");
  need(loss_patch_pairs >= 1, "loss_patch_pairs must be >= 1");
  need(learning_rate > 0, "learning_rate must be > 0");
  need(weight_decay >= 0, "weight_decay must be >= 0");
  need(rre_threshold_deg > 0 && rte_threshold_m > 0, "metric thresholds must be > 0");
  need(overlap_tau > 0, "overlap_tau must be > 0");
  need(icp_iters >= 1, "icp_iters must be >= 1");
  need(icp_max_corr > 0, "icp_max_corr must be > 0");
  need(synth_voxel1 > 0 && synth_voxel2 > 0, "synth voxels must be > 0");
  need(synth_noise1 >= 0 && synth_noise2 >= 0, "synth noise must be >= 0");
  need(synth_keep1 > 0 && synth_keep1 <= 1 && synth_keep2 > 0 && synth_keep2 <= 1,
       "synth keep fractions must be in (0,1]");
  need(synth_translation >= 0, "synth_translation must be >= 0");
}

std::string ModelConfig::serialize() const {
  std::string out;
  for (const auto& [key, field] : fields())
    out += key + " = " + field.to_string(*this) + "\n";
  return out;
}

std::uint64_t ModelConfig::hash() const {
  const std::string text = serialize();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = fields().find(key);
    if (it == fields().end())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": unknown key '" + key + "'");
    try {
      it->second.from_string(cfg, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ", key '" +
                        key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ModelConfig::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out.good()) throw IoError("cannot open config for writing: " + path);
  out << serialize();
  if (!out.good()) throw IoError("config write failed: " + path);
}

ModelConfig ModelConfig::forest_preset() {
  ModelConfig cfg;
  cfg.rre_threshold_deg = 0.5;
  cfg.rte_threshold_m = 0.3;
  return cfg;
}

ModelConfig ModelConfig::toy_preset() {
  ModelConfig cfg;
  cfg.backbone_voxels = {0.6, 1.2, 2.4, 4.8};
  cfg.backbone_widths = {32, 32, 48, 64};
  cfg.d_t = 64;
  cfg.n_skeleton = 24;
  cfg.rounds = 2;
  cfg.n_coarse = 96;
  cfg.n_replace = 24;
  cfg.n_topk_skeletal = 12;
  cfg.n_patch = 48;
  cfg.tau_a = 1.0;
  cfg.sigma_c = 1.0;
  cfg.overlap_tau = 1.0;
  cfg.loss_patch_pairs = 16;
  cfg.sinkhorn_iters = 50;
  cfg.learning_rate = 1e-3;
  return cfg;
}

}  // namespace spreg
