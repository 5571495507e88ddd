#pragma once

#include <stdexcept>

#include "fdsm/autodiff.hpp"

namespace fdsm {

/// Exact (v^T grad_x)^T f(x) by T nested reverse passes, one value per row.
///
/// f maps a [B,d] batch to [B] per-row scalars and rows must not interact.
/// The first T-1 passes are recorded so the next one can differentiate them;
/// the last pass is recorded only when `differentiable` is set, which is what
/// callers need for a parameter gradient. Without it the tape reaches depth T.
template <class S, class F>
Var<S> exact_directional_derivative(F&& f, const Var<S>& x, const Tensor<S>& v, int order,
                                    bool differentiable = false) {
  if (order < 1) throw std::invalid_argument("exact_directional_derivative: order must be >= 1, got " + std::to_string(order));
  if (x.shape() != v.shape()) throw ShapeError("exact_directional_derivative", x.shape(), v.shape());
  const Var<S> point = x.requires_grad() ? x : Var<S>::leaf(x.value());
  const auto dir = Var<S>::constant(v);
  Var<S> current = f(point);
  for (int t = 1; t <= order; ++t) {
    const bool record = t < order || differentiable;
    const auto g = gradient(sum(current), point, record);
    current = row_dot(g, dir);
  }
  return current;
}

template <class S, class F>
Tensor<S> exact_directional_derivative(F&& f, const Tensor<S>& x, const Tensor<S>& v, int order) {
  return exact_directional_derivative<S>(std::forward<F>(f), Var<S>::leaf(x), v, order).value();
}

}  // namespace fdsm
