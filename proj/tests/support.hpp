#pragma once
// Test-side oracles shared across suites.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fairm2s/autodiff.hpp"
#include "fairm2s/data.hpp"
#include "fairm2s/param_set.hpp"

namespace fm_test {

using fairm2s::ParamSet;
using fairm2s::Tensor;
using fairm2s::Vector;

inline Tensor<double> random_tensor(std::mt19937_64& rng, int rows, int cols, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

/// Central differences of f at x, step h * max(1, |x_i|), evaluated in double.
inline Vector<double> numeric_gradient(const std::function<double(const Vector<double>&)>& f, Vector<double> x,
                                       double h = 1e-6) {
  Vector<double> g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x(i);
    const double step = h * std::max(1.0, std::abs(xi));
    x(i) = xi + step;
    const double fp = f(x);
    x(i) = xi - step;
    const double fm = f(x);
    x(i) = xi;
    g(i) = (fp - fm) / (2 * step);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const Vector<double>& a, const Vector<double>& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0 ? 0.0 : (a - b).norm() / scale;
}

/// Tiny participant pool with constant features per record, for sampling tests.
inline std::vector<fairm2s::ParticipantRecord> toy_pool(int n_pos, int n_neg, int T = 2, int d = 2,
                                                        std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.f, 1.f);
  std::vector<fairm2s::ParticipantRecord> pool;
  for (int i = 0; i < n_pos + n_neg; ++i) {
    fairm2s::ParticipantRecord r;
    r.id = "t" + std::to_string(i);
    r.label = i < n_pos ? 1 : 0;
    r.group = i % 3 == 0 ? 1 : 0;
    r.features.resize(T, d);
    for (Eigen::Index k = 0; k < r.features.size(); ++k) r.features.data()[k] = noise(rng);
    pool.push_back(std::move(r));
  }
  return pool;
}

}  // namespace fm_test
