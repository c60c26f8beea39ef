#pragma once

#include "spreg/rng.hpp"
#include "spreg/tensor.hpp"
#include "spreg/types.hpp"

#include <functional>
#include <vector>

namespace spreg::test {

inline Matrix random_matrix(Index rows, Index cols, Xoshiro256& rng,
                            double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

inline Points random_points(Index n, Xoshiro256& rng, double extent = 10.0) {
  Points p(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = rng.uniform(-extent, extent);
  return p;
}

inline RigidTransform random_transform(Xoshiro256& rng, double max_trans = 5.0) {
  const double yaw = rng.uniform(0, 6.283185307179586);
  const double pitch = rng.uniform(-0.6, 0.6);
  const double roll = rng.uniform(-0.6, 0.6);
  const Vec3 t(rng.uniform(-max_trans, max_trans),
               rng.uniform(-max_trans, max_trans),
               rng.uniform(-max_trans, max_trans));
  return RigidTransform::from_yaw_pitch_roll(yaw, pitch, roll, t);
}

struct GradCheck {
  double max_rel_err = 0.0;
  int checked = 0;
};

/// Central finite differences against reverse-mode gradients. `build` must
/// reconstruct the loss graph from the targets' current values on every
/// call. Entries are subsampled deterministically when a target exceeds
/// `max_entries` (0 = check everything). Relative error is measured only on
/// entries where either gradient exceeds `floor` in magnitude.
inline GradCheck check_gradients(const std::function<ad::Tensor()>& build,
                                 const std::vector<ad::Tensor>& targets,
                                 double h = 1e-5, int max_entries = 0,
                                 double floor_mag = 1e-6) {
  GradCheck result;

  const ad::Tensor loss = build();
  ad::backward(loss);
  std::vector<Matrix> analytic;
  analytic.reserve(targets.size());
  for (const auto& t : targets) analytic.push_back(t.grad());

  for (size_t ti = 0; ti < targets.size(); ++ti) {
    ad::Tensor t = targets[ti];  // handle copy; shares the underlying node
    const Index total = t.size();
    const Index stride =
        (max_entries > 0 && total > max_entries)
            ? (total + max_entries - 1) / max_entries
            : 1;
    for (Index flat = 0; flat < total; flat += stride) {
      const Index i = flat / t.cols();
      const Index j = flat % t.cols();
      const double saved = t.value()(i, j);

      t.value()(i, j) = saved + h;
      const double up = build().item();
      t.value()(i, j) = saved - h;
      const double down = build().item();
      t.value()(i, j) = saved;

      const double fd = (up - down) / (2.0 * h);
      const double an = analytic[ti](i, j);
      ++result.checked;
      if (std::max(std::abs(fd), std::abs(an)) <= floor_mag) continue;
      const double rel = std::abs(fd - an) / std::max(std::abs(fd), std::abs(an));
      result.max_rel_err = std::max(result.max_rel_err, rel);
    }
  }
  return result;
}

}  // namespace spreg::test
