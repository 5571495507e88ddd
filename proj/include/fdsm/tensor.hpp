#pragma once

// Dense row-major tensors of rank 0..2 with the handful of kernels the
// differentiation engine needs. Matrix products go through Eigen maps.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdsm/memory.hpp"

namespace fdsm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b)),
        op_(op),
        lhs_(a),
        rhs_(b) {}
  const std::string& op() const noexcept { return op_; }
  const Shape& lhs() const noexcept { return lhs_; }
  const Shape& rhs() const noexcept { return rhs_; }

 private:
  std::string op_;
  Shape lhs_, rhs_;
};

template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Storage = std::vector<S, TrackingAllocator<S>>;

  Tensor() : shape_{}, data_(1, S(0)) {}
  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::span<const S> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_numel(shape_))
      throw std::invalid_argument("Tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                                  shape_str(shape_));
  }
  Tensor(Shape shape, std::initializer_list<S> values)
      : Tensor(std::move(shape), std::span<const S>(values.begin(), values.size())) {}

  static Tensor scalar(S v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }
  static Tensor zeros(Shape s) { return Tensor(std::move(s), S(0)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), S(1)); }
  static Tensor vector(std::initializer_list<S> v) { return Tensor({v.size()}, v); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<S> v) {
    return Tensor({rows, cols}, v);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? shape_[0] : 1); }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : 1; }
  std::size_t nbytes() const noexcept { return data_.size() * sizeof(S); }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return {data_.data(), data_.size()}; }
  std::span<const S> values() const noexcept { return {data_.data(), data_.size()}; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  S& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const S& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  S item() const {
    if (data_.size() != 1) throw std::invalid_argument("Tensor::item: tensor has shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size()) throw ShapeError("reshape", shape_, s);
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && std::equal(a.data_.begin(), a.data_.end(), b.data_.begin());
  }

 private:
  Shape shape_;
  Storage data_;
};

namespace kernels {

template <class S, class F>
Tensor<S> map(const Tensor<S>& a, F f) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

/// Logistic sigmoid, vectorized; the branch keeps exp's argument non-positive.
template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  using A = Eigen::Array<S, Eigen::Dynamic, 1>;
  Tensor<S> out(a.shape());
  Eigen::Map<const A> x(a.data(), static_cast<Eigen::Index>(a.size()));
  const A e = (-x.abs()).exp();
  Eigen::Map<A>(out.data(), static_cast<Eigen::Index>(a.size())) = (x >= S(0)).select(S(1) / (S(1) + e), e / (S(1) + e));
  return out;
}

/// softplus(x) = max(x, 0) + log1p(e^-|x|); when `sig` is given it also receives sigmoid(x)
/// from the same exponential.
template <class S>
Tensor<S> softplus(const Tensor<S>& a, Tensor<S>* sig = nullptr) {
  using A = Eigen::Array<S, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(a.size());
  Tensor<S> out(a.shape());
  Eigen::Map<const A> x(a.data(), n);
  const A e = (-x.abs()).exp();
  // log1p(e) as e log(u) / (u - 1) with u = 1 + e: accurate to a few ulp and vectorizes.
  const A u = e + S(1);
  Eigen::Map<A>(out.data(), n) = x.max(S(0)) + (u == S(1)).select(e, e * u.log() / (u - S(1)));
  if (sig) {
    *sig = Tensor<S>(a.shape());
    Eigen::Map<A>(sig->data(), n) = (x >= S(0)).select(S(1) / (S(1) + e), e / (S(1) + e));
  }
  return out;
}

/// Elementwise binary op. b may equal a's shape, be a row vector broadcast
/// across the leading batch dimension of a rank-2 a, or be a scalar.
template <class S, class F>
Tensor<S> zip(const char* op, const Tensor<S>& a, const Tensor<S>& b, F f) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i], pb[i]);
  } else if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) {
    const std::size_t n = a.dim(1);
    for (std::size_t r = 0; r < a.dim(0); ++r)
      for (std::size_t c = 0; c < n; ++c) po[r * n + c] = f(pa[r * n + c], pb[c]);
  } else if (b.rank() == 0) {
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i], pb[0]);
  } else {
    throw ShapeError(op, a.shape(), b.shape());
  }
  return out;
}

template <class S>
using RowMajor = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// op(a) * op(b) for rank-2 operands, op = optional transpose.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb) throw ShapeError("matmul", a.shape(), b.shape());
  Tensor<S> out({m, n});
  Eigen::Map<const RowMajor<S>> ma(a.data(), a.dim(0), a.dim(1));
  Eigen::Map<const RowMajor<S>> mb(b.data(), b.dim(0), b.dim(1));
  Eigen::Map<RowMajor<S>> mo(out.data(), m, n);
  if (!trans_a && !trans_b)
    mo.noalias() = ma * mb;
  else if (trans_a && !trans_b)
    mo.noalias() = ma.transpose() * mb;
  else if (!trans_a && trans_b)
    mo.noalias() = ma * mb.transpose();
  else
    mo.noalias() = ma.transpose() * mb.transpose();
  return out;
}

template <class S>
S sum(const Tensor<S>& a) {
  S acc = 0;
  for (S v : a.values()) acc += v;
  return acc;
}

/// [B,n] -> [n]
template <class S>
Tensor<S> sum_rows(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("sum_rows", a.shape(), {});
  Tensor<S> out({a.dim(1)});
  for (std::size_t r = 0; r < a.dim(0); ++r)
    for (std::size_t c = 0; c < a.dim(1); ++c) out[c] += a(r, c);
  return out;
}

/// [B,n] -> [B]
template <class S>
Tensor<S> row_sum(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("row_sum", a.shape(), {});
  Tensor<S> out({a.dim(0)});
  for (std::size_t r = 0; r < a.dim(0); ++r) {
    S acc = 0;
    for (std::size_t c = 0; c < a.dim(1); ++c) acc += a(r, c);
    out[r] = acc;
  }
  return out;
}

/// [n] -> [rows,n]
template <class S>
Tensor<S> tile_rows(const Tensor<S>& a, std::size_t rows) {
  if (a.rank() != 1) throw ShapeError("tile_rows", a.shape(), {rows});
  Tensor<S> out({rows, a.dim(0)});
  for (std::size_t r = 0; r < rows; ++r) std::copy(a.data(), a.data() + a.size(), out.data() + r * a.size());
  return out;
}

/// [B] -> [B,cols]
template <class S>
Tensor<S> tile_cols(const Tensor<S>& a, std::size_t cols) {
  if (a.rank() != 1) throw ShapeError("tile_cols", a.shape(), {cols});
  Tensor<S> out({a.dim(0), cols});
  for (std::size_t r = 0; r < a.dim(0); ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = a[r];
  return out;
}

/// Stack tensors along the leading dimension.
template <class S>
Tensor<S> concat_rows(std::span<const Tensor<S>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail)
      throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
  }
  Shape s = tail;
  s.insert(s.begin(), rows);
  Tensor<S> out(s);
  S* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.size(), dst);
  return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, std::size_t start, std::size_t count) {
  if (a.rank() == 0 || start + count > a.dim(0)) throw ShapeError("slice_rows", a.shape(), {start, count});
  Shape s = a.shape();
  s[0] = count;
  const std::size_t stride = a.size() / a.dim(0);
  return Tensor<S>(s, std::span<const S>(a.data() + start * stride, count * stride));
}

/// Inverse of slice_rows: place a into zeros of `total` rows at `start`.
template <class S>
Tensor<S> pad_rows(const Tensor<S>& a, std::size_t start, std::size_t total) {
  if (a.rank() == 0 || start + a.dim(0) > total) throw ShapeError("pad_rows", a.shape(), {start, total});
  Shape s = a.shape();
  s[0] = total;
  Tensor<S> out(s);
  const std::size_t stride = a.size() / a.dim(0);
  std::copy(a.data(), a.data() + a.size(), out.data() + start * stride);
  return out;
}

}  // namespace kernels
}  // namespace fdsm
