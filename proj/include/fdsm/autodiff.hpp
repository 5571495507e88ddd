#pragma once

// Reverse-mode differentiation with nesting.
//
// Every op on Var records a node (value, parents, backward rule) when the
// thread's tape is recording and some input requires a derivative. Backward
// rules are themselves written with Var ops, so running gradient() with
// create_graph=true records the backward pass one tape level deeper and its
// results can be differentiated again. This is reverse-over-reverse nesting;
// depth 3 (parameter gradient of a Hessian-vector product) is the deepest
// the objectives need, but nothing caps it.
//
// A tape is thread-confined: recording state and counters are thread_local.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fdsm/tensor.hpp"

namespace fdsm {

/// Cost accounting shared by models, objectives and the bench harness.
struct EvalCounters {
  std::uint64_t forward_calls = 0;       // model evaluator invocations
  std::uint64_t forward_rows = 0;        // rows pushed through the model
  std::uint64_t first_order_passes = 0;  // gradient() on a first-level graph, not recorded
  std::uint64_t nested_passes = 0;       // recorded gradient(), or gradient of a derivative graph
  int max_tape_depth = 0;                // deepest tape level that recorded a node

  std::uint64_t derivative_passes() const { return first_order_passes + nested_passes; }

  /// Folds in counts gathered on another thread.
  EvalCounters& merge(const EvalCounters& o) {
    forward_calls += o.forward_calls;
    forward_rows += o.forward_rows;
    first_order_passes += o.first_order_passes;
    nested_passes += o.nested_passes;
    max_tape_depth = max_tape_depth > o.max_tape_depth ? max_tape_depth : o.max_tape_depth;
    return *this;
  }
};

namespace detail {
struct TapeState {
  bool recording = true;
  int depth = 1;
  std::uint64_t next_seq = 1;
  EvalCounters counters;
};
inline TapeState& tape() {
  thread_local TapeState state;
  return state;
}
}  // namespace detail

/// Read-only view of this thread's tape.
struct Tape {
  static int depth() { return detail::tape().depth; }
  static bool recording() { return detail::tape().recording; }
  static EvalCounters& counters() { return detail::tape().counters; }
};

/// Disable recording in a scope.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::tape().recording) { detail::tape().recording = false; }
  ~NoGradGuard() { detail::tape().recording = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Captures the counter delta accumulated while the scope is alive.
class CounterScope {
 public:
  CounterScope() : start_(Tape::counters()), outer_depth_(start_.max_tape_depth) {
    Tape::counters().max_tape_depth = 0;
  }
  ~CounterScope() {
    auto& c = Tape::counters();
    c.max_tape_depth = std::max(c.max_tape_depth, outer_depth_);
  }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

  EvalCounters delta() const {
    const auto& c = Tape::counters();
    EvalCounters d;
    d.forward_calls = c.forward_calls - start_.forward_calls;
    d.forward_rows = c.forward_rows - start_.forward_rows;
    d.first_order_passes = c.first_order_passes - start_.first_order_passes;
    d.nested_passes = c.nested_passes - start_.nested_passes;
    d.max_tape_depth = c.max_tape_depth;
    return d;
  }

 private:
  EvalCounters start_;
  int outer_depth_;
};

template <class S>
class Var;

template <class S>
struct Node {
  using BackwardFn = std::function<std::vector<Var<S>>(const Var<S>& self, const Var<S>& grad)>;

  Tensor<S> value;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  const char* op = "leaf";
  std::uint64_t seq = 0;
  int depth = 0;  // tape level that recorded the node; 0 for leaves and constants
  bool requires_grad = false;
};

template <class S>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<S>>;

  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  static Var constant(Tensor<S> t) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(t);
    n->op = "const";
    return Var(std::move(n));
  }
  /// Leaf whose derivative can be requested.
  static Var leaf(Tensor<S> t, bool requires_grad = true) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    n->seq = detail::tape().next_seq++;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<S>& value() const { return node_->value; }
  /// Leaves only; used by optimizers between steps.
  Tensor<S>& mutable_value() {
    if (node_->parents.size()) throw std::logic_error("mutable_value on a non-leaf node");
    return node_->value;
  }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  int depth() const { return node_->depth; }
  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  Var parent(std::size_t i) const { return Var(node_->parents.at(i)); }

 private:
  NodePtr node_;
};

template <class S>
Var<S> make_op(const char* op, Tensor<S> value, const std::vector<Var<S>>& inputs,
               typename Node<S>::BackwardFn backward) {
  auto& tape = detail::tape();
  bool any = false;
  int depth = tape.depth;
  for (const auto& in : inputs) {
    any = any || in.requires_grad();
    depth = std::max(depth, in.node()->depth);
  }
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->op = op;
  if (tape.recording && any) {
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(backward);
    n->requires_grad = true;
    n->seq = tape.next_seq++;
    n->depth = depth;
    tape.counters.max_tape_depth = std::max(tape.counters.max_tape_depth, depth);
  }
  return Var<S>(std::move(n));
}

template <class S>
Var<S> make_op(const char* op, Tensor<S> value, std::initializer_list<Var<S>> inputs,
               typename Node<S>::BackwardFn backward) {
  return make_op<S>(op, std::move(value), std::vector<Var<S>>(inputs), std::move(backward));
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> constant_like(const Var<S>& a, S fill) {
  return Var<S>::constant(Tensor<S>(a.shape(), fill));
}

template <class S>
Var<S> sum(const Var<S>& a);
template <class S>
Var<S> sum_rows(const Var<S>& a);
template <class S>
Var<S> reshape(const Var<S>& a, Shape s);

namespace detail {
// Reduce a gradient of a's broadcast shape back to b's shape.
template <class S>
Var<S> unbroadcast(const Var<S>& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (target.empty()) return sum(g);
  return sum_rows(g);
}
template <class S>
void check_broadcast(const char* op, const Var<S>& a, const Var<S>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return;
  if (sa.size() == 2 && sb.size() == 1 && sb[0] == sa[1]) return;
  if (sb.empty()) return;
  throw ShapeError(op, sa, sb);
}
}  // namespace detail

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape() && (b.shape().size() > a.shape().size())) return add(b, a);
  detail::check_broadcast("add", a, b);
  return make_op<S>("add", kernels::zip("add", a.value(), b.value(), [](S x, S y) { return x + y; }), {a, b},
                    [](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{g, detail::unbroadcast(g, self.parent(1).shape())};
                    });
}

template <class S>
Var<S> neg(const Var<S>& a) {
  return make_op<S>("neg", kernels::map(a.value(), [](S x) { return -x; }), {a},
                    [](const Var<S>&, const Var<S>& g) { return std::vector<Var<S>>{neg(g)}; });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape() && (b.shape().size() > a.shape().size())) return add(neg(b), a);
  detail::check_broadcast("sub", a, b);
  return make_op<S>("sub", kernels::zip("sub", a.value(), b.value(), [](S x, S y) { return x - y; }), {a, b},
                    [](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{g, neg(detail::unbroadcast(g, self.parent(1).shape()))};
                    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape() && (b.shape().size() > a.shape().size())) return mul(b, a);
  detail::check_broadcast("mul", a, b);
  return make_op<S>("mul", kernels::zip("mul", a.value(), b.value(), [](S x, S y) { return x * y; }), {a, b},
                    [](const Var<S>& self, const Var<S>& g) {
                      const auto pa = self.parent(0);
                      const auto pb = self.parent(1);
                      return std::vector<Var<S>>{mul(g, pb), detail::unbroadcast(mul(g, pa), pb.shape())};
                    });
}

template <class S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
  detail::check_broadcast("div", a, b);
  return make_op<S>("div", kernels::zip("div", a.value(), b.value(), [](S x, S y) { return x / y; }), {a, b},
                    [](const Var<S>& self, const Var<S>& g) {
                      const auto pb = self.parent(1);
                      const auto ga = div(g, pb);
                      // d(a/b)/db = -(a/b)/b
                      const auto gb = neg(div(mul(g, self), pb));
                      return std::vector<Var<S>>{ga, detail::unbroadcast(gb, pb.shape())};
                    });
}

template <class S>
Var<S> scale(const Var<S>& a, double c) {
  const S k = static_cast<S>(c);
  return make_op<S>("scale", kernels::map(a.value(), [k](S x) { return k * x; }), {a},
                    [c](const Var<S>&, const Var<S>& g) { return std::vector<Var<S>>{scale(g, c)}; });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, double c) {
  const S k = static_cast<S>(c);
  return make_op<S>("add_scalar", kernels::map(a.value(), [k](S x) { return x + k; }), {a},
                    [](const Var<S>&, const Var<S>& g) { return std::vector<Var<S>>{g}; });
}

template <class S>
Var<S> square(const Var<S>& a) {
  return make_op<S>("square", kernels::map(a.value(), [](S x) { return x * x; }), {a},
                    [](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{scale(mul(g, self.parent(0)), 2.0)};
                    });
}

template <class S>
Var<S> exp(const Var<S>& a) {
  return make_op<S>("exp", kernels::map(a.value(), [](S x) { return std::exp(x); }), {a},
                    [](const Var<S>& self, const Var<S>& g) { return std::vector<Var<S>>{mul(g, self)}; });
}

template <class S>
Var<S> log(const Var<S>& a) {
  return make_op<S>("log", kernels::map(a.value(), [](S x) { return std::log(x); }), {a},
                    [](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{div(g, self.parent(0))};
                    });
}

namespace detail {
/// Sigmoid node over `a` with a precomputed value.
template <class S>
Var<S> sigmoid_node(const Var<S>& a, Tensor<S> value) {
  return make_op<S>("sigmoid", std::move(value), {a}, [](const Var<S>& self, const Var<S>& g) {
    // s' = s (1 - s)
    const auto one_minus = add_scalar(neg(self), 1.0);
    return std::vector<Var<S>>{mul(g, mul(self, one_minus))};
  });
}
}  // namespace detail

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  return detail::sigmoid_node(a, kernels::sigmoid(a.value()));
}

/// log(1 + e^x), evaluated without overflow. While recording, sigmoid(x) is computed
/// alongside and reused by the backward pass.
template <class S>
Var<S> softplus(const Var<S>& a) {
  if (!Tape::recording() || !a.requires_grad()) return make_op<S>("softplus", kernels::softplus(a.value()), {a}, {});
  Tensor<S> sig;
  auto value = kernels::softplus(a.value(), &sig);
  return make_op<S>("softplus", std::move(value), {a},
                    [sig = std::move(sig)](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{mul(g, detail::sigmoid_node(self.parent(0), sig))};
                    });
}

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool trans_a = false, bool trans_b = false) {
  return make_op<S>("matmul", kernels::matmul(a.value(), b.value(), trans_a, trans_b), {a, b},
                    [trans_a, trans_b](const Var<S>& self, const Var<S>& g) {
                      const auto A = self.parent(0);
                      const auto B = self.parent(1);
                      if (!trans_a && !trans_b) return std::vector<Var<S>>{matmul(g, B, false, true), matmul(A, g, true, false)};
                      if (trans_a && !trans_b) return std::vector<Var<S>>{matmul(B, g, false, true), matmul(A, g, false, false)};
                      if (!trans_a && trans_b) return std::vector<Var<S>>{matmul(g, B, false, false), matmul(g, A, true, false)};
                      return std::vector<Var<S>>{matmul(B, g, true, true), matmul(g, A, true, true)};
                    });
}

template <class S>
Var<S> reshape(const Var<S>& a, Shape s) {
  return make_op<S>("reshape", a.value().reshaped(std::move(s)), {a}, [](const Var<S>& self, const Var<S>& g) {
    return std::vector<Var<S>>{reshape(g, self.parent(0).shape())};
  });
}

/// Broadcast a one-element tensor to `s`.
template <class S>
Var<S> expand(const Var<S>& a, Shape s) {
  if (a.value().size() != 1) throw ShapeError("expand", a.shape(), s);
  return make_op<S>("expand", Tensor<S>(s, a.value()[0]), {a}, [](const Var<S>& self, const Var<S>& g) {
    return std::vector<Var<S>>{reshape(sum(g), self.parent(0).shape())};
  });
}

template <class S>
Var<S> sum(const Var<S>& a) {
  return make_op<S>("sum", Tensor<S>::scalar(kernels::sum(a.value())), {a},
                    [](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{expand(g, self.parent(0).shape())};
                    });
}

template <class S>
Var<S> mean(const Var<S>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

template <class S>
Var<S> tile_rows(const Var<S>& a, std::size_t rows);
template <class S>
Var<S> tile_cols(const Var<S>& a, std::size_t cols);

/// [B,n] -> [n]
template <class S>
Var<S> sum_rows(const Var<S>& a) {
  return make_op<S>("sum_rows", kernels::sum_rows(a.value()), {a}, [](const Var<S>& self, const Var<S>& g) {
    return std::vector<Var<S>>{tile_rows(g, self.parent(0).shape()[0])};
  });
}

/// [n] -> [rows,n]
template <class S>
Var<S> tile_rows(const Var<S>& a, std::size_t rows) {
  return make_op<S>("tile_rows", kernels::tile_rows(a.value(), rows), {a},
                    [](const Var<S>&, const Var<S>& g) { return std::vector<Var<S>>{sum_rows(g)}; });
}

/// [B,n] -> [B]
template <class S>
Var<S> row_sum(const Var<S>& a) {
  return make_op<S>("row_sum", kernels::row_sum(a.value()), {a}, [](const Var<S>& self, const Var<S>& g) {
    return std::vector<Var<S>>{tile_cols(g, self.parent(0).shape()[1])};
  });
}

/// [B] -> [B,cols]
template <class S>
Var<S> tile_cols(const Var<S>& a, std::size_t cols) {
  return make_op<S>("tile_cols", kernels::tile_cols(a.value(), cols), {a},
                    [](const Var<S>&, const Var<S>& g) { return std::vector<Var<S>>{row_sum(g)}; });
}

template <class S>
Var<S> slice_rows(const Var<S>& a, std::size_t start, std::size_t count);

template <class S>
Var<S> pad_rows(const Var<S>& a, std::size_t start, std::size_t total) {
  return make_op<S>("pad_rows", kernels::pad_rows(a.value(), start, total), {a},
                    [start](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{slice_rows(g, start, self.parent(0).shape()[0])};
                    });
}

template <class S>
Var<S> slice_rows(const Var<S>& a, std::size_t start, std::size_t count) {
  return make_op<S>("slice_rows", kernels::slice_rows(a.value(), start, count), {a},
                    [start](const Var<S>& self, const Var<S>& g) {
                      return std::vector<Var<S>>{pad_rows(g, start, self.parent(0).shape()[0])};
                    });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  std::vector<Tensor<S>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  return make_op<S>("concat_rows", kernels::concat_rows<S>(values), parts, [](const Var<S>& self, const Var<S>& g) {
    std::vector<Var<S>> out;
    std::size_t offset = 0;
    for (const auto& p : self.node()->parents) {
      const auto rows = p->value.shape()[0];
      out.push_back(slice_rows(g, offset, rows));
      offset += rows;
    }
    return out;
  });
}

/// Per-row inner product of two [B,d] operands -> [B].
template <class S>
Var<S> row_dot(const Var<S>& a, const Var<S>& b) {
  return row_sum(mul(a, b));
}

template <class S>
Var<S> dot(const Var<S>& a, const Var<S>& b) {
  return sum(mul(a, b));
}

template <class S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <class S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <class S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <class S>
Var<S> operator/(const Var<S>& a, const Var<S>& b) { return div(a, b); }
template <class S>
Var<S> operator-(const Var<S>& a) { return neg(a); }
template <class S>
Var<S> operator*(const Var<S>& a, double c) { return scale(a, c); }
template <class S>
Var<S> operator*(double c, const Var<S>& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// d(output)/d(wrt[i]) for every requested node.
///
/// With create_graph the backward rules are recorded one tape level above the
/// output's, so the results can be differentiated again. Nodes the output
/// does not depend on receive a zero tensor of matching shape.
template <class S>
std::vector<Var<S>> gradient(const Var<S>& output, std::span<const Var<S>> wrt, bool create_graph = false) {
  if (output.value().size() != 1)
    throw std::invalid_argument("gradient: output must be a scalar, got shape " + shape_str(output.shape()));

  auto& tape = detail::tape();
  if (create_graph || output.requires_grad() && output.depth() > 1)
    ++tape.counters.nested_passes;
  else
    ++tape.counters.first_order_passes;

  std::vector<Var<S>> result;
  result.reserve(wrt.size());
  if (!output.requires_grad()) {
    for (const auto& w : wrt) result.push_back(constant_like(w, S(0)));
    return result;
  }

  // Reachable recorded nodes, visited in reverse recording order.
  using NodePtr = std::shared_ptr<Node<S>>;
  std::vector<NodePtr> order;
  std::unordered_set<const Node<S>*> seen;
  std::vector<NodePtr> stack{output.node()};
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

  std::unordered_set<const Node<S>*> keep;
  for (const auto& w : wrt) keep.insert(w.node().get());

  const bool prev_recording = tape.recording;
  const int prev_depth = tape.depth;
  tape.recording = create_graph;
  tape.depth = create_graph ? output.depth() + 1 : prev_depth;
  struct Restore {
    detail::TapeState& t;
    bool rec;
    int depth;
    ~Restore() {
      t.recording = rec;
      t.depth = depth;
    }
  } restore{tape, prev_recording, prev_depth};

  std::unordered_map<const Node<S>*, Var<S>> grads;
  grads.emplace(output.node().get(), Var<S>::constant(Tensor<S>(output.shape(), S(1))));
  for (const auto& n : order) {
    auto it = grads.find(n.get());
    if (it == grads.end()) continue;
    Var<S> g = it->second;
    if (!keep.count(n.get())) grads.erase(it);
    if (!n->backward) continue;
    const auto parent_grads = n->backward(Var<S>(n), g);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      if (!p->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(p.get(), parent_grads[i]);
      if (!inserted) slot->second = add(slot->second, parent_grads[i]);
    }
  }

  for (const auto& w : wrt) {
    auto it = grads.find(w.node().get());
    result.push_back(it == grads.end() ? constant_like(w, S(0)) : it->second);
  }
  return result;
}

template <class S>
std::vector<Var<S>> gradient(const Var<S>& output, const std::vector<Var<S>>& wrt, bool create_graph = false) {
  return gradient(output, std::span<const Var<S>>(wrt.data(), wrt.size()), create_graph);
}

template <class S>
Var<S> gradient(const Var<S>& output, const Var<S>& wrt, bool create_graph = false) {
  return gradient(output, std::span<const Var<S>>(&wrt, 1), create_graph)[0];
}

}  // namespace fdsm
