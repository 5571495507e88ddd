#pragma once

// First-order optimizers over leaf parameters.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdsm/autodiff.hpp"

namespace fdsm {

enum class OptimizerKind { kSgd, kAdam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (valid: sgd, adam)");
}

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& block)
      : std::runtime_error("non-finite gradient in parameter block '" + block + "'"), block_(block) {}
  const std::string& block() const noexcept { return block_; }

 private:
  std::string block_;
};

template <class S>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw std::invalid_argument("optimizer: learning rate must be > 0");
  }

  /// Apply one update. `names` labels parameter blocks in error messages.
  void step(std::vector<Var<S>>& params, const std::vector<Tensor<S>>& grads,
            const std::vector<std::string>& names = {}) {
    if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].shape() != params[i].shape()) throw ShapeError("optimizer", params[i].shape(), grads[i].shape());
      if (!grads[i].all_finite()) throw NonFiniteGradient(i < names.size() ? names[i] : "param" + std::to_string(i));
    }
    if (cfg_.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].mutable_value();
        for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<S>(w[j] - cfg_.lr * grads[i][j]);
      }
      ++t_;
      return;
    }
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.shape(), 0.0);
        v_.emplace_back(p.shape(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].mutable_value();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = grads[i][j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m[j] / c1, vh = v[j] / c2;
        w[j] = static_cast<S>(w[j] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  std::size_t steps() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor<double>> m_, v_;  // moments kept in double regardless of S
  std::size_t t_ = 0;
};

}  // namespace fdsm
