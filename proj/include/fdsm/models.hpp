#pragma once

// Smooth parametric models. Energies map a [B,d] batch to [B] values of
// log p~(x); score models map [B,d] to [B,d]. Every model call bumps the
// thread's forward counters by one call and B rows.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdsm/autodiff.hpp"

namespace fdsm {

template <class M>
concept EnergyModel = requires(const M& m, const Var<typename M::Scalar>& x) {
  { m.energy(x) } -> std::same_as<Var<typename M::Scalar>>;
  { m.parameters() } -> std::convertible_to<const std::vector<Var<typename M::Scalar>>&>;
  { m.input_dim() } -> std::convertible_to<std::size_t>;
};

template <class M>
concept ScoreModel = requires(const M& m, const Var<typename M::Scalar>& x) {
  { m.score(x) } -> std::same_as<Var<typename M::Scalar>>;
  { m.parameters() } -> std::convertible_to<const std::vector<Var<typename M::Scalar>>&>;
  { m.input_dim() } -> std::convertible_to<std::size_t>;
};

namespace detail {
inline void count_forward(std::size_t rows) {
  auto& c = Tape::counters();
  ++c.forward_calls;
  c.forward_rows += rows;
}

template <class S>
void check_width(const char* op, const Var<S>& x, std::size_t width) {
  if (x.shape().size() != 2 || x.shape()[1] != width) throw ShapeError(op, x.shape(), {0, width});
}
}  // namespace detail

/// Fully connected Softplus network; no activation after the last layer.
template <class S>
class Mlp {
 public:
  Mlp() = default;

  /// Glorot-uniform weights, zero biases; deterministic for a seed.
  static Mlp init(std::vector<std::size_t> widths, std::uint64_t seed) {
    if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
    for (auto w : widths)
      if (w == 0) throw std::invalid_argument("Mlp: widths must be positive");
    Mlp m;
    m.widths_ = std::move(widths);
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < m.widths_.size(); ++l) {
      const auto fan_in = m.widths_[l], fan_out = m.widths_[l + 1];
      const double bound = glorot_bound(fan_in, fan_out);
      std::uniform_real_distribution<double> u(-bound, bound);
      Tensor<S> w({fan_in, fan_out});
      for (auto& e : w.values()) e = static_cast<S>(u(rng));
      m.params_.push_back(Var<S>::leaf(std::move(w)));
      m.params_.push_back(Var<S>::leaf(Tensor<S>({fan_out})));
      m.names_.push_back("layer" + std::to_string(l) + ".weight");
      m.names_.push_back("layer" + std::to_string(l) + ".bias");
    }
    return m;
  }

  static double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  }

  /// Rebuild from explicit layer tensors (weights [in,out], biases [out]).
  static Mlp from_layers(const std::vector<Tensor<S>>& weights, const std::vector<Tensor<S>>& biases) {
    if (weights.empty() || weights.size() != biases.size()) throw std::invalid_argument("Mlp: mismatched layer lists");
    Mlp m;
    m.widths_.push_back(weights[0].dim(0));
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rank() != 2 || weights[l].dim(0) != m.widths_.back() || biases[l].shape() != Shape{weights[l].dim(1)})
        throw ShapeError("Mlp::from_layers", weights[l].shape(), biases[l].shape());
      m.widths_.push_back(weights[l].dim(1));
      m.params_.push_back(Var<S>::leaf(weights[l]));
      m.params_.push_back(Var<S>::leaf(biases[l]));
      m.names_.push_back("layer" + std::to_string(l) + ".weight");
      m.names_.push_back("layer" + std::to_string(l) + ".bias");
    }
    return m;
  }

  Var<S> forward(const Var<S>& x) const {
    detail::check_width("Mlp::forward", x, widths_.front());
    Var<S> h = x;
    const std::size_t layers = widths_.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      h = add(matmul(h, params_[2 * l]), params_[2 * l + 1]);
      if (l + 1 < layers) h = softplus(h);
    }
    return h;
  }

  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t layer_count() const { return widths_.size() - 1; }
  const std::vector<Var<S>>& parameters() const { return params_; }
  std::vector<Var<S>>& parameters() { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  const Tensor<S>& weight(std::size_t l) const { return params_.at(2 * l).value(); }
  const Tensor<S>& bias(std::size_t l) const { return params_.at(2 * l + 1).value(); }

  /// Deep copy with fresh parameter leaves.
  Mlp clone() const {
    Mlp m;
    m.widths_ = widths_;
    m.names_ = names_;
    for (const auto& p : params_) m.params_.push_back(Var<S>::leaf(p.value()));
    return m;
  }

 private:
  std::vector<std::size_t> widths_;
  std::vector<Var<S>> params_;
  std::vector<std::string> names_;
};

/// log p~(x) as a Softplus MLP with a scalar output.
template <class S>
class MlpEnergyModel {
 public:
  using Scalar = S;

  MlpEnergyModel() = default;
  explicit MlpEnergyModel(Mlp<S> net) : net_(std::move(net)) {
    if (net_.widths().back() != 1) throw std::invalid_argument("MlpEnergyModel: output width must be 1");
  }
  /// widths: input d, hidden widths...; the scalar output layer is appended.
  static MlpEnergyModel init(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::uint64_t seed) {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(1);
    return MlpEnergyModel(Mlp<S>::init(std::move(w), seed));
  }

  Var<S> energy(const Var<S>& x) const {
    detail::count_forward(x.shape().at(0));
    return reshape(net_.forward(x), {x.shape()[0]});
  }

  std::size_t input_dim() const { return net_.widths().front(); }
  const std::vector<Var<S>>& parameters() const { return net_.parameters(); }
  std::vector<Var<S>>& parameters() { return net_.parameters(); }
  const std::vector<std::string>& parameter_names() const { return net_.parameter_names(); }
  const Mlp<S>& network() const { return net_; }
  MlpEnergyModel clone() const { return MlpEnergyModel(net_.clone()); }

 private:
  Mlp<S> net_;
};

/// s(x) as a Softplus MLP with output width equal to input width.
template <class S>
class MlpScoreModel {
 public:
  using Scalar = S;

  MlpScoreModel() = default;
  explicit MlpScoreModel(Mlp<S> net) : net_(std::move(net)) {
    if (net_.widths().back() != net_.widths().front())
      throw std::invalid_argument("MlpScoreModel: output width must equal input width");
  }
  static MlpScoreModel init(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::uint64_t seed) {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(input_dim);
    return MlpScoreModel(Mlp<S>::init(std::move(w), seed));
  }

  Var<S> score(const Var<S>& x) const {
    detail::count_forward(x.shape().at(0));
    return net_.forward(x);
  }

  std::size_t input_dim() const { return net_.widths().front(); }
  const std::vector<Var<S>>& parameters() const { return net_.parameters(); }
  std::vector<Var<S>>& parameters() { return net_.parameters(); }
  const std::vector<std::string>& parameter_names() const { return net_.parameter_names(); }
  const Mlp<S>& network() const { return net_; }
  MlpScoreModel clone() const { return MlpScoreModel(net_.clone()); }

 private:
  Mlp<S> net_;
};

/// L(x) = -precision/2 * |x - mean|^2. Closed-form score -precision (x - mean).
template <class S>
class QuadraticEnergyModel {
 public:
  using Scalar = S;

  explicit QuadraticEnergyModel(std::size_t dim, bool learnable = false, double precision = 1.0)
      : QuadraticEnergyModel(Tensor<S>({dim}), precision, learnable) {}
  QuadraticEnergyModel(Tensor<S> mean, double precision, bool learnable = false)
      : dim_(mean.size()),
        mean_(Var<S>::leaf(std::move(mean), learnable)),
        precision_(Var<S>::leaf(Tensor<S>::scalar(static_cast<S>(precision)), learnable)) {
    if (learnable) params_ = {mean_, precision_};
  }

  Var<S> energy(const Var<S>& x) const {
    detail::check_width("QuadraticEnergyModel::energy", x, dim_);
    detail::count_forward(x.shape()[0]);
    return scale(mul(row_sum(square(sub(x, mean_))), precision_), -0.5);
  }

  Tensor<S> analytic_score(const Tensor<S>& x) const {
    Tensor<S> out(x.shape());
    const S p = precision_.value().item();
    for (std::size_t r = 0; r < x.dim(0); ++r)
      for (std::size_t c = 0; c < dim_; ++c) out(r, c) = -p * (x(r, c) - mean_.value()[c]);
    return out;
  }

  std::size_t input_dim() const { return dim_; }
  const std::vector<Var<S>>& parameters() const { return params_; }
  std::vector<Var<S>>& parameters() { return params_; }

 private:
  std::size_t dim_;
  Var<S> mean_;
  Var<S> precision_;
  std::vector<Var<S>> params_;
};

/// Energy shifted by a constant, standing in for an unknown log-partition term.
template <EnergyModel M>
class OffsetEnergy {
 public:
  using Scalar = typename M::Scalar;
  OffsetEnergy(const M& model, double offset) : model_(&model), offset_(offset) {}
  Var<Scalar> energy(const Var<Scalar>& x) const { return add_scalar(model_->energy(x), offset_); }
  std::size_t input_dim() const { return model_->input_dim(); }
  const std::vector<Var<Scalar>>& parameters() const { return model_->parameters(); }

 private:
  const M* model_;
  double offset_;
};

/// L(x) = log sum_j exp(w_j . x + c_j): smooth, non-polynomial, parameter-free.
template <class S>
class LogSumExpEnergy {
 public:
  using Scalar = S;
  LogSumExpEnergy(Tensor<S> w, Tensor<S> c) : w_(std::move(w)), c_(std::move(c)) {
    if (w_.rank() != 2 || c_.shape() != Shape{w_.dim(0)}) throw ShapeError("LogSumExpEnergy", w_.shape(), c_.shape());
  }
  static LogSumExpEnergy random(std::size_t dim, std::size_t terms, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor<S> w({terms, dim}), c({terms});
    for (auto& e : w.values()) e = static_cast<S>(n(rng));
    for (auto& e : c.values()) e = static_cast<S>(0.5 * n(rng));
    return LogSumExpEnergy(std::move(w), std::move(c));
  }
  Var<S> energy(const Var<S>& x) const {
    detail::check_width("LogSumExpEnergy::energy", x, w_.dim(1));
    detail::count_forward(x.shape()[0]);
    const auto z = add(matmul(x, Var<S>::constant(w_), false, true), Var<S>::constant(c_));
    return log(row_sum(exp(z)));
  }
  std::size_t input_dim() const { return w_.dim(1); }
  const std::vector<Var<S>>& parameters() const { return none_; }

 private:
  Tensor<S> w_, c_;
  std::vector<Var<S>> none_;
};

/// grad_x log p~(x) for an energy model, s(x) for a score model; no tape kept.
template <class M>
Tensor<typename M::Scalar> model_score(const M& model, const Tensor<typename M::Scalar>& x) {
  using S = typename M::Scalar;
  if constexpr (ScoreModel<M>) {
    NoGradGuard guard;
    return model.score(Var<S>::constant(x)).value();
  } else {
    const auto xl = Var<S>::leaf(x);
    return gradient(sum(model.energy(xl)), xl).value();
  }
}

/// Batch evaluator over plain tensors, for finite-difference code paths.
template <EnergyModel M>
auto energy_evaluator(const M& model) {
  using S = typename M::Scalar;
  return [&model](const Tensor<S>& x) {
    NoGradGuard guard;
    return model.energy(Var<S>::constant(x)).value();
  };
}

}  // namespace fdsm
