#include "spreg/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace spreg::ad {

Tensor& ParameterStore::create(const std::string& path, Matrix init,
                               int logical_rank) {
  if (params_.count(path))
    throw ContractError("parameter path already exists: " + path);
  if (!init.allFinite())
    throw ContractError("parameter init not finite: " + path);
  auto [it, ok] = params_.emplace(path, Tensor::parameter(std::move(init),
                                                          logical_rank));
  return it->second;
}

const Tensor& ParameterStore::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractError("unknown parameter path: " + path);
  return it->second;
}

Tensor& ParameterStore::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractError("unknown parameter path: " + path);
  return it->second;
}

void ParameterStore::allocate_gradients() {
  for (auto& [path, t] : params_) t.zero_grad();
}

void ParameterStore::zero_gradients() { allocate_gradients(); }

ParameterStore ParameterStore::detached_copy() const {
  ParameterStore out;
  for (const auto& [path, t] : params_)
    out.params_.emplace(path, Tensor::constant(t.value(), t.logical_rank()));
  return out;
}

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in.good()) throw IoError("truncated parameter stream");
  return v;
}

}  // namespace

void ParameterStore::save(std::ostream& out) const {
  out.write("SPWT", 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size()));
  for (const auto& [path, t] : params_) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(path.size()));
    out.write(path.data(), static_cast<std::streamsize>(path.size()));
    const int rank = t.logical_rank();
    put<std::uint8_t>(out, static_cast<std::uint8_t>(rank));
    if (rank == 1) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.size()));
    } else if (rank == 2) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    }
    for (Index i = 0; i < t.rows(); ++i)
      for (Index j = 0; j < t.cols(); ++j)
        put<float>(out, static_cast<float>(t.value()(i, j)));
  }
  if (!out.good()) throw IoError("parameter stream write failed");
}

void ParameterStore::load(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in.good() || std::memcmp(magic, "SPWT", 4) != 0)
    throw IoError("bad parameter stream magic (expected SPWT)");
  const auto count = get<std::uint32_t>(in);
  params_.clear();
  for (std::uint32_t p = 0; p < count; ++p) {
    const auto len = get<std::uint16_t>(in);
    std::string path(len, '\0');
    in.read(path.data(), len);
    if (!in.good()) throw IoError("truncated parameter path");
    const int rank = get<std::uint8_t>(in);
    Index rows = 1, cols = 1;
    if (rank == 1) {
      cols = get<std::uint32_t>(in);
    } else if (rank == 2) {
      rows = get<std::uint32_t>(in);
      cols = get<std::uint32_t>(in);
    } else if (rank != 0) {
      throw IoError("unsupported parameter rank " + std::to_string(rank));
    }
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = get<float>(in);
    create(path, std::move(m), rank);
  }
}

void ParameterStore::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw IoError("cannot open for writing: " + path);
  save(out);
}

void ParameterStore::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw IoError("cannot open for reading: " + path);
  load(in);
}

void adam_step(ParameterStore& params, AdamState& state) {
  // Validate first so the step is all-or-nothing.
  for (const auto& [path, t] : params)
    if (!t.grad_allocated())
      throw ContractError("adam_step: missing gradient for parameter " + path);

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  for (auto& [path, t] : params) {
    auto& [m, v] = state.moments[path];
    if (m.size() == 0) {
      m = Matrix::Zero(t.rows(), t.cols());
      v = Matrix::Zero(t.rows(), t.cols());
    }
    const Matrix& g = t.grad();
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    const Matrix mhat = m / bc1;
    const Matrix vhat = v / bc2;
    t.value().array() -= state.learning_rate *
                         (mhat.array() / (vhat.array().sqrt() + state.eps));
    if (state.weight_decay != 0.0)
      t.value() -= state.learning_rate * state.weight_decay * t.value();
    t.zero_grad();
  }
}

void init_glorot(Matrix& w, Xoshiro256& rng) {
  const double fan_in = static_cast<double>(w.rows());
  const double fan_out = static_cast<double>(w.cols());
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-bound, bound);
}

}  // namespace spreg::ad
