#pragma once

#include "spreg/io.hpp"
#include "spreg/metrics.hpp"
#include "spreg/pipeline.hpp"

#include <array>
#include <string>
#include <vector>

namespace spreg {

/// Registers every manifest pair and writes three CSV artifacts into
/// `out_dir`: per_pair.csv, rr_sweep.csv (registration recall over a grid of
/// RRE/RTE thresholds) and overlap_bins.csv (10%-wide overlap bins).
/// Unreadable pairs are recorded as failures and the run continues. Pairs
/// are evaluated concurrently (`workers`, or the SPREG_THREADS environment
/// variable when workers <= 0); outputs are ordered by pair index so the
/// CSVs are deterministic.
MetricReport run_benchmark(const std::vector<PairSpec>& pairs,
                           const ad::ParameterStore& params,
                           const ModelConfig& cfg, const std::string& out_dir,
                           int workers = 0);

/// Checkpoint = parameter serialization + metadata (config hash, epoch,
/// PRNG state as 4 u64 words).
struct Checkpoint {
  ad::ParameterStore params;
  std::uint64_t config_hash = 0;
  std::uint32_t epoch = 0;
  std::array<std::uint64_t, 4> rng_state{};
};

void save_checkpoint(const std::string& path, const ad::ParameterStore& params,
                     std::uint64_t config_hash, std::uint32_t epoch,
                     const std::array<std::uint64_t, 4>& rng_state);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace spreg
