#include "spreg/benchmark.hpp"

#include <cstring>
#include <fstream>

namespace spreg {

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in.good()) throw IoError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ad::ParameterStore& params,
                     std::uint64_t config_hash, std::uint32_t epoch,
                     const std::array<std::uint64_t, 4>& rng_state) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw IoError("cannot open checkpoint for writing: " + path);
  params.save(out);
  out.write("SPMD", 4);
  put<std::uint64_t>(out, config_hash);
  put<std::uint32_t>(out, epoch);
  for (std::uint64_t w : rng_state) put<std::uint64_t>(out, w);
  if (!out.good()) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw IoError("cannot open checkpoint: " + path);
  Checkpoint ck;
  ck.params.load(in);
  char magic[4];
  in.read(magic, 4);
  if (!in.good() || std::memcmp(magic, "SPMD", 4) != 0)
    throw IoError("checkpoint lacks SPMD metadata block: " + path);
  ck.config_hash = get<std::uint64_t>(in);
  ck.epoch = get<std::uint32_t>(in);
  for (auto& w : ck.rng_state) w = get<std::uint64_t>(in);
  return ck;
}

}  // namespace spreg
