#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "fdsm/tensor.hpp"

namespace fdsm::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

/// Central-difference gradient of a scalar function of a tensor.
inline Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double h = 1e-6) {
  Tensor<double> g(x.shape());
  Tensor<double> xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, max_i |b_i|)
inline double max_rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < b.size(); ++i) scale = std::max(scale, std::abs(b[i]));
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst / scale;
}

}  // namespace fdsm::testing
