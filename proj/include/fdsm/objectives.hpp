#pragma once

// Score-matching objectives. Gradient-based baselines build their input
// derivatives by nested differentiation; the finite-difference variants only
// evaluate the model, stacking every shifted point into one batch.
//
// All objectives return a scalar loss that is differentiable with respect to
// the model parameters, the per-sample values, and the counters accumulated
// while the loss was built (the parameter-gradient pass is not included).

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdsm/autodiff.hpp"
#include "fdsm/models.hpp"

namespace fdsm {

enum class ObjectiveKind { kSm, kDsm, kDsmSliced, kSsm, kSsmvr, kFdSsm, kFdDsm, kFdSsmvr, kMpfNaive };

inline const std::vector<std::string>& objective_tokens() {
  static const std::vector<std::string> t{"sm",    "dsm",    "dsm-sliced", "ssm",      "ssmvr",
                                          "fd-ssm", "fd-dsm", "fd-ssmvr",   "mpf-naive"};
  return t;
}

inline std::string objective_name(ObjectiveKind k) { return objective_tokens()[static_cast<std::size_t>(k)]; }

inline ObjectiveKind parse_objective(const std::string& s) {
  const auto& t = objective_tokens();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] == s) return static_cast<ObjectiveKind>(i);
  std::string valid;
  for (const auto& n : t) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown objective '" + s + "' (valid: " + valid + ")");
}

/// ssmvr and fd-ssmvr train a vector score model; the rest train an energy.
inline bool needs_score_model(ObjectiveKind k) { return k == ObjectiveKind::kSsmvr || k == ObjectiveKind::kFdSsmvr; }
inline bool is_finite_difference(ObjectiveKind k) {
  return k == ObjectiveKind::kFdSsm || k == ObjectiveKind::kFdDsm || k == ObjectiveKind::kFdSsmvr ||
         k == ObjectiveKind::kMpfNaive;
}
inline bool uses_noise(ObjectiveKind k) {
  return k == ObjectiveKind::kDsm || k == ObjectiveKind::kDsmSliced || k == ObjectiveKind::kFdDsm;
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

template <class S>
struct DirectionSample {
  Tensor<S> v;  // [B,d], every row of norm epsilon
  double epsilon = 0.0;

  DirectionSample scaled(double factor) const {
    DirectionSample out{v, epsilon * factor};
    for (auto& e : out.v.values()) e = static_cast<S>(e * factor);
    return out;
  }
  /// v -> -v; the radius stays epsilon.
  DirectionSample negated() const { return {scaled(-1.0).v, epsilon}; }
};

/// Uniform directions on the sphere of radius epsilon: Gaussian draws, normalized.
template <class S>
DirectionSample<S> sample_direction(std::size_t batch, std::size_t dim, double epsilon, std::mt19937_64& rng) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("sample_direction: epsilon must be > 0, got " + std::to_string(epsilon));
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<S> v({batch, dim});
  std::vector<double> row(dim);
  for (std::size_t r = 0; r < batch; ++r) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& e : row) {
        e = n(rng);
        norm += e * e;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < dim; ++c) v(r, c) = static_cast<S>(row[c] * epsilon / norm);
  }
  return {std::move(v), epsilon};
}

/// x + sigma z with z ~ N(0, I).
template <class S>
Tensor<S> perturb(const Tensor<S>& x, double sigma, std::mt19937_64& rng) {
  if (!(sigma > 0.0)) throw std::invalid_argument("perturb: sigma must be > 0, got " + std::to_string(sigma));
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<S> out = x;
  for (auto& e : out.values()) e = static_cast<S>(e + sigma * n(rng));
  return out;
}

template <class S>
struct ObjectiveEstimate {
  Var<S> loss;            // scalar; differentiate w.r.t. model parameters
  double value = 0.0;
  Tensor<S> per_sample;   // [B]
  EvalCounters counters;  // accumulated while building the loss
  double epsilon = 0.0;
  double sigma = 0.0;
};

namespace detail {

template <class S>
ObjectiveEstimate<S> finish(const Var<S>& per, const CounterScope& scope, double eps, double sigma) {
  ObjectiveEstimate<S> est;
  est.per_sample = per.value();
  est.loss = mean(per);
  est.value = static_cast<double>(est.loss.value().item());
  est.counters = scope.delta();
  est.epsilon = eps;
  est.sigma = sigma;
  return est;
}

template <class S>
void check_directions(const char* op, const Tensor<S>& x, const DirectionSample<S>& d) {
  if (x.shape() != d.v.shape()) throw ShapeError(op, x.shape(), d.v.shape());
  if (!(d.epsilon > 0.0)) throw std::invalid_argument(std::string(op) + ": epsilon must be > 0");
}

inline void check_sigma(const char* op, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument(std::string(op) + ": sigma must be > 0, got " + std::to_string(sigma));
}

// (x_tilde - x) / sigma^2 as a constant
template <class S>
Var<S> noise_target(const Tensor<S>& x, const Tensor<S>& x_tilde, double sigma) {
  if (x.shape() != x_tilde.shape()) throw ShapeError("dsm", x.shape(), x_tilde.shape());
  Tensor<S> t(x.shape());
  const double inv = 1.0 / (sigma * sigma);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>((x_tilde[i] - x[i]) * inv);
  return Var<S>::constant(std::move(t));
}

// grad_x sum L(x), recorded so it can be differentiated again
template <EnergyModel M>
Var<typename M::Scalar> input_score(const M& model, const Var<typename M::Scalar>& x) {
  return gradient(sum(model.energy(x)), x, true);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient-based baselines
// ---------------------------------------------------------------------------

/// mean of tr(H) + 1/2 |g|^2 with g = grad_x L, by d nested passes for the trace.
/// Set differentiable=false for evaluation-only use.
template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> sm_exact(const M& model, const Tensor<typename M::Scalar>& x,
                                               bool differentiable = true) {
  using S = typename M::Scalar;
  CounterScope scope;
  const auto xl = Var<S>::leaf(x);
  const auto g = detail::input_score(model, xl);
  const std::size_t b = x.dim(0), d = x.dim(1);
  Var<S> trace = Var<S>::constant(Tensor<S>({b}));
  for (std::size_t i = 0; i < d; ++i) {
    Tensor<S> e({b, d});
    for (std::size_t r = 0; r < b; ++r) e(r, i) = S(1);
    const auto ei = Var<S>::constant(std::move(e));
    const auto hi = gradient(sum(row_dot(g, ei)), xl, differentiable);
    trace = add(trace, row_dot(hi, ei));
  }
  const auto per = add(trace, scale(row_sum(square(g)), 0.5));
  return detail::finish(per, scope, 0.0, 0.0);
}

/// Score-model analogue: mean of tr(J_s) + 1/2 |s|^2.
template <ScoreModel M>
ObjectiveEstimate<typename M::Scalar> sm_exact(const M& model, const Tensor<typename M::Scalar>& x,
                                               bool differentiable = true) {
  using S = typename M::Scalar;
  CounterScope scope;
  const auto xl = Var<S>::leaf(x);
  const auto s = model.score(xl);
  const std::size_t b = x.dim(0), d = x.dim(1);
  Var<S> trace = Var<S>::constant(Tensor<S>({b}));
  for (std::size_t i = 0; i < d; ++i) {
    Tensor<S> e({b, d});
    for (std::size_t r = 0; r < b; ++r) e(r, i) = S(1);
    const auto ei = Var<S>::constant(std::move(e));
    trace = add(trace, row_dot(gradient(sum(row_dot(s, ei)), xl, differentiable), ei));
  }
  const auto per = add(trace, scale(row_sum(square(s)), 0.5));
  return detail::finish(per, scope, 0.0, 0.0);
}

/// (1/d) mean |grad L(x~) + (x~ - x)/sigma^2|^2 for a given perturbed batch.
template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> dsm(const M& model, const Tensor<typename M::Scalar>& x,
                                          const Tensor<typename M::Scalar>& x_tilde, double sigma) {
  using S = typename M::Scalar;
  detail::check_sigma("dsm", sigma);
  CounterScope scope;
  const auto target = detail::noise_target(x, x_tilde, sigma);
  const auto xt = Var<S>::leaf(x_tilde);
  const auto g = detail::input_score(model, xt);
  const auto per = scale(row_sum(square(add(g, target))), 1.0 / static_cast<double>(x.dim(1)));
  return detail::finish(per, scope, 0.0, sigma);
}

template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> dsm(const M& model, const Tensor<typename M::Scalar>& x, double sigma,
                                          std::mt19937_64& rng) {
  detail::check_sigma("dsm", sigma);
  return dsm(model, x, perturb(x, sigma, rng), sigma);
}

/// (1/eps^2) mean (v . grad L(x~) + v . (x~ - x)/sigma^2)^2
template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> dsm_sliced(const M& model, const Tensor<typename M::Scalar>& x,
                                                 const Tensor<typename M::Scalar>& x_tilde, double sigma,
                                                 const DirectionSample<typename M::Scalar>& dir) {
  using S = typename M::Scalar;
  detail::check_sigma("dsm_sliced", sigma);
  detail::check_directions("dsm_sliced", x, dir);
  CounterScope scope;
  const auto target = detail::noise_target(x, x_tilde, sigma);
  const auto v = Var<S>::constant(dir.v);
  const auto xt = Var<S>::leaf(x_tilde);
  const auto g = detail::input_score(model, xt);
  const auto proj = add(row_dot(g, v), row_dot(target, v));
  const auto per = scale(square(proj), 1.0 / (dir.epsilon * dir.epsilon));
  return detail::finish(per, scope, dir.epsilon, sigma);
}

/// (1/C_v) mean [v^T H v + 1/2 (v . g)^2], C_v = eps^2; H v by a second nested pass.
template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> ssm(const M& model, const Tensor<typename M::Scalar>& x,
                                          const DirectionSample<typename M::Scalar>& dir) {
  using S = typename M::Scalar;
  detail::check_directions("ssm", x, dir);
  CounterScope scope;
  const auto v = Var<S>::constant(dir.v);
  const auto xl = Var<S>::leaf(x);
  const auto g = detail::input_score(model, xl);
  const auto gv = row_dot(g, v);
  const auto hv = gradient(sum(gv), xl, true);
  const auto per = scale(add(row_dot(hv, v), scale(square(gv), 0.5)), 1.0 / (dir.epsilon * dir.epsilon));
  return detail::finish(per, scope, dir.epsilon, 0.0);
}

/// (1/eps^2) mean v^T J_s v + |s|^2 / (2d) on a score model.
template <ScoreModel M>
ObjectiveEstimate<typename M::Scalar> ssmvr(const M& model, const Tensor<typename M::Scalar>& x,
                                            const DirectionSample<typename M::Scalar>& dir) {
  using S = typename M::Scalar;
  detail::check_directions("ssmvr", x, dir);
  CounterScope scope;
  const auto v = Var<S>::constant(dir.v);
  const auto xl = Var<S>::leaf(x);
  const auto s = model.score(xl);
  const auto jv = gradient(sum(row_dot(s, v)), xl, true);  // v^T J per row
  const auto per = add(scale(row_dot(jv, v), 1.0 / (dir.epsilon * dir.epsilon)),
                       scale(row_sum(square(s)), 0.5 / static_cast<double>(x.dim(1))));
  return detail::finish(per, scope, dir.epsilon, 0.0);
}

// ---------------------------------------------------------------------------
// Finite-difference objectives
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Tensor<S> offset_rows(const Tensor<S>& x, const Tensor<S>& v, double sign) {
  Tensor<S> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<S>(x[i] + sign * v[i]);
  return out;
}

template <class S>
std::vector<Var<S>> split_rows(const Var<S>& all, std::size_t parts, std::size_t rows) {
  std::vector<Var<S>> out;
  for (std::size_t p = 0; p < parts; ++p) out.push_back(slice_rows(all, p * rows, rows));
  return out;
}

}  // namespace detail

/// (1/eps^2) mean [L(x+v) + L(x-v) - 2 L(x) + (L(x+v) - L(x-v))^2 / 8],
/// from one model call on the stacked batch [x, x+v, x-v].
template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> fd_ssm(const M& model, const Tensor<typename M::Scalar>& x,
                                             const DirectionSample<typename M::Scalar>& dir) {
  using S = typename M::Scalar;
  detail::check_directions("fd_ssm", x, dir);
  CounterScope scope;
  const std::size_t b = x.dim(0);
  const std::vector<Tensor<S>> parts{x, detail::offset_rows(x, dir.v, 1.0), detail::offset_rows(x, dir.v, -1.0)};
  const auto all = model.energy(Var<S>::constant(kernels::concat_rows<S>(parts)));
  const auto l = detail::split_rows(all, 3, b);
  const auto diff = sub(l[1], l[2]);
  const auto second = sub(add(l[1], l[2]), scale(l[0], 2.0));
  const auto per = scale(add(second, scale(square(diff), 0.125)), 1.0 / (dir.epsilon * dir.epsilon));
  return detail::finish(per, scope, dir.epsilon, 0.0);
}

/// (1/(4 eps^2)) mean (L(x~+v) - L(x~-v) + 2 v . (x~ - x)/sigma^2)^2
template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> fd_dsm(const M& model, const Tensor<typename M::Scalar>& x,
                                             const Tensor<typename M::Scalar>& x_tilde, double sigma,
                                             const DirectionSample<typename M::Scalar>& dir) {
  using S = typename M::Scalar;
  detail::check_sigma("fd_dsm", sigma);
  detail::check_directions("fd_dsm", x, dir);
  CounterScope scope;
  const auto target = detail::noise_target(x, x_tilde, sigma);
  const auto v = Var<S>::constant(dir.v);
  const std::vector<Tensor<S>> parts{detail::offset_rows(x_tilde, dir.v, 1.0),
                                     detail::offset_rows(x_tilde, dir.v, -1.0)};
  const auto all = model.energy(Var<S>::constant(kernels::concat_rows<S>(parts)));
  const auto l = detail::split_rows(all, 2, x.dim(0));
  const auto inner = add(sub(l[0], l[1]), scale(row_dot(target, v), 2.0));
  const auto per = scale(square(inner), 0.25 / (dir.epsilon * dir.epsilon));
  return detail::finish(per, scope, dir.epsilon, sigma);
}

/// |s(x+v) + s(x-v)|^2 / (8d) + (v . s(x+v) - v . s(x-v)) / (2 eps^2)
template <ScoreModel M>
ObjectiveEstimate<typename M::Scalar> fd_ssmvr(const M& model, const Tensor<typename M::Scalar>& x,
                                               const DirectionSample<typename M::Scalar>& dir) {
  using S = typename M::Scalar;
  detail::check_directions("fd_ssmvr", x, dir);
  CounterScope scope;
  const auto v = Var<S>::constant(dir.v);
  const std::vector<Tensor<S>> parts{detail::offset_rows(x, dir.v, 1.0), detail::offset_rows(x, dir.v, -1.0)};
  const auto all = model.score(Var<S>::constant(kernels::concat_rows<S>(parts)));
  const auto s = detail::split_rows(all, 2, x.dim(0));
  const auto norm_term = scale(row_sum(square(add(s[0], s[1]))), 1.0 / (8.0 * static_cast<double>(x.dim(1))));
  const auto div_term = scale(sub(row_dot(v, s[0]), row_dot(v, s[1])), 0.5 / (dir.epsilon * dir.epsilon));
  const auto per = add(norm_term, div_term);
  return detail::finish(per, scope, dir.epsilon, 0.0);
}

/// Naive one-sided reformulation: (1/(2 eps^2)) mean [(L(x+v) - L(x))^2 + 4 (L(x+v) - L(x))].
/// Matches ssm only in expectation over v; pair v with -v to cancel the first-order term.
template <EnergyModel M>
ObjectiveEstimate<typename M::Scalar> mpf_naive(const M& model, const Tensor<typename M::Scalar>& x,
                                                const DirectionSample<typename M::Scalar>& dir) {
  using S = typename M::Scalar;
  detail::check_directions("mpf_naive", x, dir);
  CounterScope scope;
  const std::vector<Tensor<S>> parts{x, detail::offset_rows(x, dir.v, 1.0)};
  const auto all = model.energy(Var<S>::constant(kernels::concat_rows<S>(parts)));
  const auto l = detail::split_rows(all, 2, x.dim(0));
  const auto delta = sub(l[1], l[0]);
  const auto per = scale(add(square(delta), scale(delta, 4.0)), 0.5 / (dir.epsilon * dir.epsilon));
  return detail::finish(per, scope, dir.epsilon, 0.0);
}

/// Stack [x; x] with directions [v; -v] so one-sided estimators see antithetic pairs.
template <class S>
std::pair<Tensor<S>, DirectionSample<S>> antithetic(const Tensor<S>& x, const DirectionSample<S>& dir) {
  const std::vector<Tensor<S>> xs{x, x};
  const std::vector<Tensor<S>> vs{dir.v, dir.negated().v};
  return {kernels::concat_rows<S>(xs), DirectionSample<S>{kernels::concat_rows<S>(vs), dir.epsilon}};
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Everything an objective may consume for one batch.
template <class S>
struct ObjectiveBatch {
  Tensor<S> x;
  DirectionSample<S> dir;
  Tensor<S> x_tilde;  // perturbed copy of x for the noise-based objectives
  double sigma = 0.1;
};

/// Draws directions, then noise, from rng (in that order).
template <class S>
ObjectiveBatch<S> make_batch(Tensor<S> x, double epsilon, double sigma, std::mt19937_64& rng) {
  ObjectiveBatch<S> b;
  b.dir = sample_direction<S>(x.dim(0), x.dim(1), epsilon, rng);
  b.x_tilde = perturb(x, sigma, rng);
  b.x = std::move(x);
  b.sigma = sigma;
  return b;
}

class ModelMismatch : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class M>
ObjectiveEstimate<typename M::Scalar> evaluate_objective(ObjectiveKind kind, const M& model,
                                                         const ObjectiveBatch<typename M::Scalar>& b) {
  if constexpr (ScoreModel<M>) {
    switch (kind) {
      case ObjectiveKind::kSsmvr:
        return ssmvr(model, b.x, b.dir);
      case ObjectiveKind::kFdSsmvr:
        return fd_ssmvr(model, b.x, b.dir);
      case ObjectiveKind::kSm:
        return sm_exact(model, b.x);
      default:
        throw ModelMismatch("objective '" + objective_name(kind) + "' needs an energy model, got a score model");
    }
  } else {
    switch (kind) {
      case ObjectiveKind::kSm:
        return sm_exact(model, b.x);
      case ObjectiveKind::kDsm:
        return dsm(model, b.x, b.x_tilde, b.sigma);
      case ObjectiveKind::kDsmSliced:
        return dsm_sliced(model, b.x, b.x_tilde, b.sigma, b.dir);
      case ObjectiveKind::kSsm:
        return ssm(model, b.x, b.dir);
      case ObjectiveKind::kFdSsm:
        return fd_ssm(model, b.x, b.dir);
      case ObjectiveKind::kFdDsm:
        return fd_dsm(model, b.x, b.x_tilde, b.sigma, b.dir);
      case ObjectiveKind::kMpfNaive:
        return mpf_naive(model, b.x, b.dir);
      default:
        throw ModelMismatch("objective '" + objective_name(kind) + "' needs a score model, got an energy model");
    }
  }
}

// ---------------------------------------------------------------------------
// Parameter gradients and angles
// ---------------------------------------------------------------------------

template <class S>
std::vector<Tensor<S>> parameter_gradient(const Var<S>& loss, const std::vector<Var<S>>& params) {
  std::vector<Tensor<S>> out;
  for (const auto& g : gradient(loss, params)) out.push_back(g.value());
  return out;
}

template <class S>
std::vector<double> flatten(const std::vector<Tensor<S>>& parts) {
  std::vector<double> out;
  for (const auto& p : parts)
    for (S v : p.values()) out.push_back(static_cast<double>(v));
  return out;
}

class ZeroGradientError : public std::domain_error {
 public:
  explicit ZeroGradientError(const std::string& side)
      : std::domain_error("grad_angle: gradient of " + side + " has zero norm"), side_(side) {}
  const std::string& side() const noexcept { return side_; }

 private:
  std::string side_;
};

/// Angle in degrees between two flattened vectors, via 2 atan2(|a^ - b^|, |a^ + b^|),
/// which stays accurate for nearly parallel inputs.
inline double angle_degrees(const std::vector<double>& a, const std::vector<double>& b, const std::string& name_a = "A",
                            const std::string& name_b = "B") {
  if (a.size() != b.size()) throw ShapeError("grad_angle", {a.size()}, {b.size()});
  double na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (!(na > 0)) throw ZeroGradientError(name_a);
  if (!(nb > 0)) throw ZeroGradientError(name_b);
  double dm = 0, dp = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ua = a[i] / na, ub = b[i] / nb;
    dm += (ua - ub) * (ua - ub);
    dp += (ua + ub) * (ua + ub);
  }
  return 2.0 * std::atan2(std::sqrt(dm), std::sqrt(dp)) * 180.0 / std::numbers::pi;
}

/// Angle between the parameter gradients of two objectives on the same batch.
template <class M>
double grad_angle(ObjectiveKind a, ObjectiveKind b, const M& model, const ObjectiveBatch<typename M::Scalar>& batch) {
  const auto ga = flatten(parameter_gradient(evaluate_objective(a, model, batch).loss, model.parameters()));
  const auto gb = flatten(parameter_gradient(evaluate_objective(b, model, batch).loss, model.parameters()));
  return angle_degrees(ga, gb, "objective A (" + objective_name(a) + ")", "objective B (" + objective_name(b) + ")");
}

}  // namespace fdsm
