#pragma once

// Finite-difference decompositions of T-th order directional derivatives.
//
// A symmetric stencil of half-width K combines L(x + a_k v) and L(x - a_k v)
// (and L(x) when T is even) so that every Taylor term of order below T and
// the odd/even terms just above it cancel, leaving (v^T grad)^T L + O(eps^2)
// relative error. The weights come from a K x K Vandermonde system in the
// squared offsets. A general stencil uses T+1 arbitrary offsets and a
// (T+1) x (T+1) Vandermonde system, with O(eps) relative error.

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdsm/tensor.hpp"

namespace fdsm {

/// Largest system solved in exact rational arithmetic.
inline constexpr std::size_t kExactSolveMaxSize = 8;
/// Condition estimate above which the floating-point solve warns.
inline constexpr double kConditionWarnThreshold = 1e12;

struct SymmetricStencil {
  int order = 0;
  int half_width = 0;
  std::vector<double> alphas;
  std::vector<double> betas;
  bool includes_center = false;
  bool exact_solve = false;
  bool exact_residual_zero = false;
  double condition_estimate = 1.0;
  std::vector<std::string> warnings;

  std::size_t evaluations() const { return 2 * static_cast<std::size_t>(half_width) + (includes_center ? 1 : 0); }
};

struct GeneralStencil {
  int order = 0;
  std::vector<double> gammas;
  std::vector<double> betas;
  bool exact_solve = false;
  bool exact_residual_zero = false;
  double condition_estimate = 1.0;
  std::vector<std::string> warnings;

  std::size_t evaluations() const { return gammas.size(); }
};

namespace detail {

using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

/// Exact value of a finite double.
inline Rational to_rational(double x) {
  if (x == 0.0) return Rational(0);
  int exp = 0;
  const double mant = std::frexp(x, &exp);  // x = mant * 2^exp, |mant| in [0.5, 1)
  const auto scaled = static_cast<long long>(std::ldexp(mant, 53));
  BigInt num(scaled);
  const int shift = exp - 53;
  if (shift >= 0) return Rational(num << shift);
  return Rational(num, BigInt(1) << -shift);
}

struct VandermondeSolution {
  std::vector<double> betas;
  bool exact = false;
  bool exact_residual_zero = false;  // rational residual, exact path only
  double condition = 1.0;
  double residual = 0.0;  // max |M beta - e_n| in double
};

// Solve sum_i beta_i * node_i^j = [j == n-1] for j = 0..n-1.
inline VandermondeSolution solve_vandermonde_exact(const std::vector<double>& nodes) {
  const std::size_t n = nodes.size();
  std::vector<std::vector<Rational>> m(n, std::vector<Rational>(n + 1));
  for (std::size_t i = 0; i < n; ++i) {
    const Rational node = to_rational(nodes[i]);
    Rational p(1);
    for (std::size_t j = 0; j < n; ++j) {
      m[j][i] = p;
      p *= node;
    }
  }
  m[n - 1][n] = 1;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    while (piv < n && m[piv][col] == 0) ++piv;
    if (piv == n) throw std::invalid_argument("stencil: singular Vandermonde system");
    std::swap(m[piv], m[col]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col || m[r][col] == 0) continue;
      const Rational f = m[r][col] / m[col][col];
      for (std::size_t c = col; c <= n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  std::vector<Rational> beta(n);
  for (std::size_t i = 0; i < n; ++i) beta[i] = m[i][n] / m[i][i];

  VandermondeSolution out;
  out.exact = true;
  out.exact_residual_zero = true;
  for (std::size_t j = 0; j < n; ++j) {
    Rational acc(0);
    for (std::size_t i = 0; i < n; ++i) {
      Rational p(1);
      const Rational node = to_rational(nodes[i]);
      for (std::size_t e = 0; e < j; ++e) p *= node;
      acc += beta[i] * p;
    }
    if (acc != Rational(j + 1 == n ? 1 : 0)) out.exact_residual_zero = false;
  }
  out.betas.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.betas[i] = static_cast<double>(beta[i]);
  return out;
}

inline VandermondeSolution solve_vandermonde_float(const std::vector<double>& nodes) {
  const std::size_t n = nodes.size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double p = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      a[j][i] = p;
      p *= nodes[i];
    }
  }
  // Gauss-Jordan with partial pivoting on [A | I] gives the inverse, which
  // yields both the solution (last column) and the 1-norm condition number.
  std::vector<std::vector<double>> w(n, std::vector<double>(2 * n, 0.0));
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(a[r].begin(), a[r].end(), w[r].begin());
    w[r][n + r] = 1.0;
  }
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(w[r][col]) > std::abs(w[piv][col])) piv = r;
    if (w[piv][col] == 0.0) throw std::invalid_argument("stencil: singular Vandermonde system");
    std::swap(w[piv], w[col]);
    const double d = w[col][col];
    for (auto& e : w[col]) e /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = w[r][col];
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < 2 * n; ++c) w[r][c] -= f * w[col][c];
    }
  }
  auto norm1 = [n](auto get) {
    double best = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += std::abs(get(r, c));
      best = std::max(best, s);
    }
    return best;
  };
  VandermondeSolution out;
  out.condition = norm1([&](std::size_t r, std::size_t c) { return a[r][c]; }) *
                  norm1([&](std::size_t r, std::size_t c) { return w[r][n + c]; });
  out.betas.resize(n);
  for (std::size_t r = 0; r < n; ++r) out.betas[r] = w[r][2 * n - 1];
  return out;
}

inline double vandermonde_residual(const std::vector<double>& nodes, const std::vector<double>& betas) {
  const std::size_t n = nodes.size();
  double worst = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<long double>(betas[i]) * std::pow(static_cast<long double>(nodes[i]), static_cast<long double>(j));
    const long double target = (j + 1 == n) ? 1.0L : 0.0L;
    worst = std::max(worst, static_cast<double>(std::abs(acc - target)));
  }
  return worst;
}

inline VandermondeSolution solve_vandermonde(const std::vector<double>& nodes) {
  auto sol = nodes.size() <= kExactSolveMaxSize ? solve_vandermonde_exact(nodes) : solve_vandermonde_float(nodes);
  sol.residual = vandermonde_residual(nodes, sol.betas);
  return sol;
}

inline double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

}  // namespace detail

/// Half-width required for order T: K = ceil(T/2).
inline int symmetric_half_width(int order) { return (order + 1) / 2; }

/// Offsets 1, 2, ..., K.
inline std::vector<double> default_alphas(int half_width) {
  std::vector<double> a(static_cast<std::size_t>(half_width));
  std::iota(a.begin(), a.end(), 1.0);
  return a;
}

/// Weights for the symmetric decomposition of order T with offsets `alphas`
/// (defaults to 1..K). Solves V^T beta = e_K with V_ij = alpha_i^(2j-2).
inline SymmetricStencil solve_symmetric(int order, std::vector<double> alphas = {}) {
  if (order < 1) throw std::invalid_argument("solve_symmetric: order must be >= 1, got " + std::to_string(order));
  const int k = symmetric_half_width(order);
  if (alphas.empty()) alphas = default_alphas(k);
  if (static_cast<int>(alphas.size()) != k)
    throw std::invalid_argument("solve_symmetric: order " + std::to_string(order) + " needs " + std::to_string(k) +
                                " offsets, got " + std::to_string(alphas.size()));
  for (double a : alphas)
    if (!(a > 0.0) || !std::isfinite(a))
      throw std::invalid_argument("solve_symmetric: offsets must be finite and positive, got " + std::to_string(a));
  if (std::set<double>(alphas.begin(), alphas.end()).size() != alphas.size())
    throw std::invalid_argument("solve_symmetric: offsets must be pairwise distinct");

  std::vector<double> nodes(alphas.size());
  std::transform(alphas.begin(), alphas.end(), nodes.begin(), [](double a) { return a * a; });
  const auto sol = detail::solve_vandermonde(nodes);

  SymmetricStencil s;
  s.order = order;
  s.half_width = k;
  s.alphas = std::move(alphas);
  s.betas = sol.betas;
  s.includes_center = order % 2 == 0;
  s.exact_solve = sol.exact;
  s.exact_residual_zero = sol.exact_residual_zero;
  s.condition_estimate = sol.condition;
  if (!sol.exact && sol.condition > kConditionWarnThreshold) {
    std::ostringstream os;
    os << "Vandermonde condition estimate " << sol.condition << " exceeds " << kConditionWarnThreshold;
    s.warnings.push_back(os.str());
  }
  return s;
}

/// Weights for T+1 arbitrary distinct offsets. Solves V^T beta = e_(T+1)
/// with V_it = gamma_i^t.
inline GeneralStencil solve_general(int order, std::vector<double> gammas) {
  if (order < 1) throw std::invalid_argument("solve_general: order must be >= 1, got " + std::to_string(order));
  if (static_cast<int>(gammas.size()) != order + 1)
    throw std::invalid_argument("solve_general: order " + std::to_string(order) + " needs " +
                                std::to_string(order + 1) + " offsets, got " + std::to_string(gammas.size()));
  for (double g : gammas)
    if (!std::isfinite(g)) throw std::invalid_argument("solve_general: offsets must be finite");
  if (std::set<double>(gammas.begin(), gammas.end()).size() != gammas.size())
    throw std::invalid_argument("solve_general: offsets must be pairwise distinct");

  const auto sol = detail::solve_vandermonde(gammas);
  GeneralStencil s;
  s.order = order;
  s.gammas = std::move(gammas);
  s.betas = sol.betas;
  s.exact_solve = sol.exact;
  s.exact_residual_zero = sol.exact_residual_zero;
  s.condition_estimate = sol.condition;
  if (!sol.exact && sol.condition > kConditionWarnThreshold) {
    std::ostringstream os;
    os << "Vandermonde condition estimate " << sol.condition << " exceeds " << kConditionWarnThreshold;
    s.warnings.push_back(os.str());
  }
  return s;
}

/// max_j |sum_k beta_k alpha_k^(2j-2) - [j == K]|
inline double coefficient_residual(const SymmetricStencil& s) {
  std::vector<double> nodes(s.alphas.size());
  std::transform(s.alphas.begin(), s.alphas.end(), nodes.begin(), [](double a) { return a * a; });
  return detail::vandermonde_residual(nodes, s.betas);
}

inline double coefficient_residual(const GeneralStencil& s) { return detail::vandermonde_residual(s.gammas, s.betas); }

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class FdMode {
  kConcatenated,  // one evaluator call on all shifted points stacked row-wise
  kParallel,      // one evaluator call per shift, issued concurrently
};

template <class S>
struct FdEstimate {
  /// (v^T grad)^T f(x) per row, i.e. eps^T times the derivative along v/|v|.
  Tensor<S> values;
  std::size_t evaluations_per_point = 0;
  std::size_t evaluator_calls = 0;
  double min_epsilon = 0.0;
  std::vector<std::string> warnings;

  double value() const { return static_cast<double>(values.item()); }
  /// Raw T-th derivative along the unit direction for row r.
  double raw(std::size_t r, int order) const {
    return static_cast<double>(values[r]) / std::pow(min_epsilon, order);
  }
};

namespace detail {

template <class S>
Tensor<S> as_batch(const Tensor<S>& t) {
  if (t.rank() == 1) return t.reshaped({1, t.dim(0)});
  if (t.rank() != 2) throw ShapeError("fd_directional", t.shape(), {});
  return t;
}

template <class S>
Tensor<S> shifted(const Tensor<S>& x, const Tensor<S>& v, double gamma) {
  Tensor<S> out(x.shape());
  const S g = static_cast<S>(gamma);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + g * v[i];
  return out;
}

// Evaluate f at x + gamma_j v for each j; returns one [B] tensor per shift.
template <class S, class F>
std::vector<Tensor<S>> evaluate_shifts(F& f, const Tensor<S>& x, const Tensor<S>& v,
                                       const std::vector<double>& shifts, FdMode mode, std::size_t& calls) {
  const std::size_t b = x.dim(0);
  std::vector<Tensor<S>> out;
  out.reserve(shifts.size());
  if (mode == FdMode::kConcatenated) {
    std::vector<Tensor<S>> parts;
    parts.reserve(shifts.size());
    for (double g : shifts) parts.push_back(g == 0.0 ? x : shifted(x, v, g));
    const Tensor<S> all = f(kernels::concat_rows<S>(parts));
    ++calls;
    if (all.size() != b * shifts.size())
      throw ShapeError("fd_directional: evaluator output", all.shape(), {b * shifts.size()});
    for (std::size_t j = 0; j < shifts.size(); ++j) out.push_back(kernels::slice_rows(all.reshaped({all.size()}), j * b, b));
  } else {
    // Workers count on their own thread-local tapes; their deltas are folded back here.
    std::vector<std::future<std::pair<Tensor<S>, EvalCounters>>> jobs;
    jobs.reserve(shifts.size());
    for (double g : shifts) {
      jobs.push_back(std::async(std::launch::async, [&f, &x, &v, g] {
        CounterScope scope;
        Tensor<S> r = f(g == 0.0 ? x : shifted(x, v, g));
        return std::make_pair(std::move(r), scope.delta());
      }));
    }
    for (auto& j : jobs) {
      auto [r, counted] = j.get();
      Tape::counters().merge(counted);
      out.push_back(r.reshaped({r.size()}));
      ++calls;
    }
  }
  return out;
}

template <class S>
double row_norm(const Tensor<S>& v, std::size_t r) {
  double acc = 0.0;
  for (std::size_t c = 0; c < v.dim(1); ++c) acc += static_cast<double>(v(r, c)) * static_cast<double>(v(r, c));
  return std::sqrt(acc);
}

template <class S>
void precision_guard(FdEstimate<S>& est, const Tensor<S>& v, const std::vector<Tensor<S>>& evals,
                     std::optional<std::size_t> center_index) {
  double eps = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < v.dim(0); ++r) eps = std::min(eps, row_norm(v, r));
  est.min_epsilon = eps;
  double scale = 0.0;
  if (center_index) {
    for (S f : evals[*center_index].values()) scale = std::max(scale, std::abs(static_cast<double>(f)));
  } else {
    for (const auto& e : evals)
      for (S f : e.values()) scale = std::max(scale, std::abs(static_cast<double>(f)));
  }
  const double guard = 1e3 * std::numeric_limits<S>::epsilon() * (1.0 + scale);
  if (eps < guard) {
    std::ostringstream os;
    os << "epsilon " << eps << " below precision guard " << guard << "; cancellation dominates";
    est.warnings.push_back(os.str());
  }
}

}  // namespace detail

/// Finite-difference estimate of (v^T grad)^T f(x) with a symmetric stencil.
///
/// `f` maps an [m,d] batch to [m] values. x and v are [d] or [B,d]; rows are
/// independent points. No derivative of f is taken.
template <class S, class F>
FdEstimate<S> fd_directional(F&& f, const Tensor<S>& x_in, const Tensor<S>& v_in, const SymmetricStencil& stencil,
                             FdMode mode = FdMode::kConcatenated) {
  const Tensor<S> x = detail::as_batch(x_in);
  const Tensor<S> v = detail::as_batch(v_in);
  if (x.shape() != v.shape()) throw ShapeError("fd_directional", x.shape(), v.shape());

  std::vector<double> shifts;
  for (double a : stencil.alphas) {
    shifts.push_back(a);
    shifts.push_back(-a);
  }
  std::optional<std::size_t> center;
  if (stencil.includes_center) {
    center = shifts.size();
    shifts.push_back(0.0);
  }

  FdEstimate<S> est;
  est.evaluations_per_point = shifts.size();
  const auto evals = detail::evaluate_shifts(f, x, v, shifts, mode, est.evaluator_calls);

  const int order = stencil.order;
  const double lead = detail::factorial(order) / 2.0;
  const std::size_t b = x.dim(0);
  est.values = Tensor<S>({b});
  for (std::size_t r = 0; r < b; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < stencil.alphas.size(); ++k) {
      const double fp = evals[2 * k][r];
      const double fm = evals[2 * k + 1][r];
      const double a = stencil.alphas[k];
      if (stencil.includes_center) {
        acc += stencil.betas[k] / (a * a) * (fp + fm - 2.0 * static_cast<double>(evals[*center][r]));
      } else {
        acc += stencil.betas[k] / a * (fp - fm);
      }
    }
    est.values[r] = static_cast<S>(lead * acc);
  }
  detail::precision_guard(est, v, evals, center);
  for (const auto& w : stencil.warnings) est.warnings.push_back(w);
  return est;
}

/// Finite-difference estimate with a general stencil: T! sum_i beta_i f(x + gamma_i v).
template <class S, class F>
FdEstimate<S> fd_directional(F&& f, const Tensor<S>& x_in, const Tensor<S>& v_in, const GeneralStencil& stencil,
                             FdMode mode = FdMode::kConcatenated) {
  const Tensor<S> x = detail::as_batch(x_in);
  const Tensor<S> v = detail::as_batch(v_in);
  if (x.shape() != v.shape()) throw ShapeError("fd_directional", x.shape(), v.shape());

  FdEstimate<S> est;
  est.evaluations_per_point = stencil.gammas.size();
  const auto evals = detail::evaluate_shifts(f, x, v, stencil.gammas, mode, est.evaluator_calls);

  std::optional<std::size_t> center;
  for (std::size_t i = 0; i < stencil.gammas.size(); ++i)
    if (stencil.gammas[i] == 0.0) center = i;

  const double lead = detail::factorial(stencil.order);
  const std::size_t b = x.dim(0);
  est.values = Tensor<S>({b});
  for (std::size_t r = 0; r < b; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < stencil.gammas.size(); ++i) acc += stencil.betas[i] * static_cast<double>(evals[i][r]);
    est.values[r] = static_cast<S>(lead * acc);
  }
  detail::precision_guard(est, v, evals, center);
  for (const auto& w : stencil.warnings) est.warnings.push_back(w);
  return est;
}

}  // namespace fdsm
