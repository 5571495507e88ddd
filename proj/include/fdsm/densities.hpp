#pragma once

// Two-dimensional synthetic data with closed-form log-density and score.
//
// gauss2   standard normal
// mog8     8 equal-weight modes on the radius-2 circle, sigma 0.1
// rings    radii 1 and 2; radius drawn as |r + 0.1 z|, angle uniform
// checker  smooth stand-in for a 4x4 checkerboard on [-2,2]^2: one isotropic
//          Gaussian (sigma 0.25) per dark cell

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdsm/stats.hpp"
#include "fdsm/tensor.hpp"

namespace fdsm {

enum class DatasetKind { kGauss2, kMog8, kRings, kChecker };

inline const std::vector<std::string>& dataset_tokens() {
  static const std::vector<std::string> t{"gauss2", "mog8", "rings", "checker"};
  return t;
}

inline std::string dataset_name(DatasetKind k) { return dataset_tokens()[static_cast<std::size_t>(k)]; }

inline DatasetKind parse_dataset(const std::string& s) {
  const auto& t = dataset_tokens();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] == s) return static_cast<DatasetKind>(i);
  std::string valid;
  for (const auto& n : t) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown dataset '" + s + "' (valid: " + valid + ")");
}

struct FisherEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  std::size_t samples = 0;
};

class ToyDensity {
 public:
  static constexpr std::size_t kDim = 2;
  static constexpr double kBoxLo = -3.0, kBoxHi = 3.0;

  explicit ToyDensity(DatasetKind kind) : kind_(kind) {
    switch (kind) {
      case DatasetKind::kGauss2:
        means_ = {{0.0, 0.0}};
        sigma_ = 1.0;
        break;
      case DatasetKind::kMog8:
        for (int k = 0; k < 8; ++k) {
          const double a = 2.0 * std::numbers::pi * k / 8.0;
          means_.push_back({2.0 * std::cos(a), 2.0 * std::sin(a)});
        }
        sigma_ = 0.1;
        break;
      case DatasetKind::kRings:
        radii_ = {1.0, 2.0};
        sigma_ = 0.1;
        break;
      case DatasetKind::kChecker:
        for (int i = 0; i < 4; ++i)
          for (int j = 0; j < 4; ++j)
            if ((i + j) % 2 == 0) means_.push_back({-1.5 + i, -1.5 + j});
        sigma_ = 0.25;
        break;
    }
  }

  DatasetKind kind() const { return kind_; }
  std::string name() const { return dataset_name(kind_); }
  std::size_t dim() const { return kDim; }
  double sigma() const { return sigma_; }
  const std::vector<std::array<double, 2>>& means() const { return means_; }

  Tensor<double> sample(std::size_t n, std::mt19937_64& rng) const {
    if (n == 0) throw std::invalid_argument("sample: n must be >= 1");
    Tensor<double> out({n, kDim});
    std::normal_distribution<double> z(0.0, 1.0);
    if (kind_ == DatasetKind::kRings) {
      std::uniform_int_distribution<std::size_t> pick(0, radii_.size() - 1);
      std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < n; ++i) {
        const double rho = std::abs(radii_[pick(rng)] + sigma_ * z(rng));
        const double a = angle(rng);
        out(i, 0) = rho * std::cos(a);
        out(i, 1) = rho * std::sin(a);
      }
      return out;
    }
    std::uniform_int_distribution<std::size_t> pick(0, means_.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& m = means_[pick(rng)];
      out(i, 0) = m[0] + sigma_ * z(rng);
      out(i, 1) = m[1] + sigma_ * z(rng);
    }
    return out;
  }

  Tensor<double> sample(std::size_t n, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    return sample(n, rng);
  }

  double log_density(double x, double y) const {
    if (kind_ == DatasetKind::kRings) {
      const double rho = std::max(std::hypot(x, y), kMinRadius);
      return log_radial(rho) - std::log(2.0 * std::numbers::pi * rho);
    }
    // log (1/M) sum_k N(x; mu_k, sigma^2 I), with a max shift for stability
    std::vector<double> e(means_.size());
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < means_.size(); ++k) {
      const double dx = x - means_[k][0], dy = y - means_[k][1];
      e[k] = -(dx * dx + dy * dy) / (2.0 * sigma_ * sigma_);
      top = std::max(top, e[k]);
    }
    double acc = 0.0;
    for (double v : e) acc += std::exp(v - top);
    return top + std::log(acc / static_cast<double>(means_.size())) - std::log(2.0 * std::numbers::pi * sigma_ * sigma_);
  }

  std::array<double, 2> score(double x, double y) const {
    if (kind_ == DatasetKind::kRings) {
      const double rho = std::max(std::hypot(x, y), kMinRadius);
      // d/drho [log f(rho) - log rho], pointed along x/rho
      const double radial = dlog_radial(rho) - 1.0 / rho;
      return {radial * x / rho, radial * y / rho};
    }
    std::vector<double> e(means_.size());
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < means_.size(); ++k) {
      const double dx = x - means_[k][0], dy = y - means_[k][1];
      e[k] = -(dx * dx + dy * dy) / (2.0 * sigma_ * sigma_);
      top = std::max(top, e[k]);
    }
    double total = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t k = 0; k < means_.size(); ++k) {
      const double w = std::exp(e[k] - top);
      total += w;
      sx += w * (means_[k][0] - x);
      sy += w * (means_[k][1] - y);
    }
    const double s2 = sigma_ * sigma_;
    return {sx / (total * s2), sy / (total * s2)};
  }

  Tensor<double> log_density(const Tensor<double>& x) const {
    check(x);
    Tensor<double> out({x.dim(0)});
    for (std::size_t i = 0; i < x.dim(0); ++i) out[i] = log_density(x(i, 0), x(i, 1));
    return out;
  }

  Tensor<double> score(const Tensor<double>& x) const {
    check(x);
    Tensor<double> out(x.shape());
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      const auto s = score(x(i, 0), x(i, 1));
      out(i, 0) = s[0];
      out(i, 1) = s[1];
    }
    return out;
  }

  /// Monte-Carlo 1/2 E_p |s(x) - grad log p(x)|^2 with its standard error.
  /// score_fn maps a Tensor<double> [n,2] to [n,2].
  template <class F>
  FisherEstimate fisher_divergence(F&& score_fn, std::size_t n, std::uint64_t seed) const {
    if (n == 0) throw std::invalid_argument("fisher_divergence: n must be >= 1");
    const auto x = sample(n, seed);
    const Tensor<double> s = score_fn(x);
    if (s.shape() != x.shape()) throw ShapeError("fisher_divergence", s.shape(), x.shape());
    const auto truth = score(x);
    std::vector<double> per(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = s(i, 0) - truth(i, 0), b = s(i, 1) - truth(i, 1);
      per[i] = 0.5 * (a * a + b * b);
    }
    const auto ms = mean_and_se(per);
    return {ms.mean, ms.standard_error, n};
  }

 private:
  static constexpr double kMinRadius = 1e-12;

  static void check(const Tensor<double>& x) {
    if (x.rank() != 2 || x.dim(1) != kDim) throw ShapeError("ToyDensity", x.shape(), {0, kDim});
  }

  // Radial density f(rho) = mean_r [phi((rho-r)/s) + phi((rho+r)/s)] / s, rho > 0,
  // evaluated with a max shift so points far from every ring stay finite.
  std::vector<double> radial_offsets(double rho) const {
    std::vector<double> u;
    for (double r : radii_) {
      u.push_back(rho - r);
      u.push_back(rho + r);
    }
    return u;
  }
  double log_radial(double rho) const {
    const auto u = radial_offsets(rho);
    const double s2 = sigma_ * sigma_;
    double top = -std::numeric_limits<double>::infinity();
    for (double v : u) top = std::max(top, -v * v / (2.0 * s2));
    double acc = 0.0;
    for (double v : u) acc += std::exp(-v * v / (2.0 * s2) - top);
    return top + std::log(acc / static_cast<double>(radii_.size())) - std::log(sigma_ * std::sqrt(2.0 * std::numbers::pi));
  }
  double dlog_radial(double rho) const {
    const auto u = radial_offsets(rho);
    const double s2 = sigma_ * sigma_;
    double top = -std::numeric_limits<double>::infinity();
    for (double v : u) top = std::max(top, -v * v / (2.0 * s2));
    double f = 0.0, df = 0.0;
    for (double v : u) {
      const double w = std::exp(-v * v / (2.0 * s2) - top);
      f += w;
      df -= w * v / s2;
    }
    return df / f;
  }

  DatasetKind kind_;
  std::vector<std::array<double, 2>> means_;
  std::vector<double> radii_;
  double sigma_ = 1.0;
};

}  // namespace fdsm
