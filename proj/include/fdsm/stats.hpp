#pragma once

// Small numeric summaries shared by the harnesses.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace fdsm {

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sample");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct MeanSe {
  double mean = 0.0;
  double standard_error = 0.0;
};

inline MeanSe mean_and_se(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean of empty sample");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double n = static_cast<double>(v.size());
  const double var = v.size() > 1 ? ss / (n - 1.0) : 0.0;
  return {m, std::sqrt(var / n)};
}

/// Least-squares slope of log(err) against log(h).
inline double loglog_slope(std::span<const double> h, std::span<const double> err) {
  if (h.size() != err.size() || h.size() < 2) throw std::invalid_argument("loglog_slope: need >= 2 matched points");
  double mx = 0, my = 0;
  const double n = static_cast<double>(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    mx += std::log(h[i]);
    my += std::log(err[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double dx = std::log(h[i]) - mx;
    sxy += dx * (std::log(err[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Number of i with v[i+1] > v[i].
inline int count_increases(std::span<const double> v) {
  int n = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1]) ++n;
  return n;
}

}  // namespace fdsm
