#pragma once

// Cost-versus-order sweep and per-objective step timing, with wall clock and counters.

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "fdsm/directional.hpp"
#include "fdsm/memory.hpp"
#include "fdsm/models.hpp"
#include "fdsm/objectives.hpp"
#include "fdsm/stats.hpp"
#include "fdsm/stencil.hpp"
#include "fdsm/trainer.hpp"

namespace fdsm {

struct BenchOptions {
  std::size_t repeats = 20;
  std::size_t warmups = 5;
};

struct BenchRecord {
  std::string method;  // exact-nested, fd, fd-parallel, or an objective token
  int order = 0;
  double wall_ms = 0;  // median over repeats
  double fwd_evals = 0;  // model forward rows per sample point
  std::uint64_t deriv_passes = 0;
  std::uint64_t nested_passes = 0;
  int max_tape_depth = 0;
  std::size_t peak_bytes = 0;
  double rel_err = std::numeric_limits<double>::quiet_NaN();  // FD vs exact; NaN where not applicable
};

/// max_i |a_i - b_i| / max_i |b_i| over the whole batch.
template <class S>
double batch_relative_error(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("batch_relative_error", a.shape(), b.shape());
  double err = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    err = std::max(err, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  return scale > 0 ? err / scale : err;
}

namespace detail {

/// Runs `body` warmups + repeats times; counters and peak memory come from the first timed run.
template <class F>
BenchRecord time_region(const BenchOptions& opt, std::size_t points, F&& body) {
  for (std::size_t i = 0; i < opt.warmups; ++i) body();
  BenchRecord rec;
  std::vector<double> ms;
  ms.reserve(opt.repeats);
  for (std::size_t i = 0; i < std::max<std::size_t>(1, opt.repeats); ++i) {
    CounterScope scope;
    PeakMemoryScope mem;
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (i == 0) {
      const auto c = scope.delta();
      rec.fwd_evals = static_cast<double>(c.forward_rows) / static_cast<double>(points);
      rec.deriv_passes = c.derivative_passes();
      rec.nested_passes = c.nested_passes;
      rec.max_tape_depth = c.max_tape_depth;
      rec.peak_bytes = mem.peak_above_baseline();
    }
  }
  rec.wall_ms = std::max(median(ms), std::numeric_limits<double>::min());
  return rec;
}

}  // namespace detail

/// Directions of norm epsilon for an order sweep, fixed by the seed.
template <class S>
Tensor<S> sweep_directions(std::size_t batch, std::size_t dim, double epsilon, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_direction<S>(batch, dim, epsilon, rng).v;
}

/// For T = 1..t_max: nested exact derivative, concatenated FD and parallel FD on the same batch.
template <EnergyModel M>
std::vector<BenchRecord> bench_order_sweep(const M& model, const Tensor<typename M::Scalar>& x, int t_max,
                                           double epsilon, std::uint64_t seed, const BenchOptions& opt = {}) {
  using S = typename M::Scalar;
  if (t_max < 2) throw std::invalid_argument("bench_order_sweep: T-max must be >= 2");
  const std::size_t b = x.dim(0);
  const auto v = sweep_directions<S>(b, x.dim(1), epsilon, seed);
  auto energy = [&model](const Var<S>& z) { return model.energy(z); };
  const auto eval = energy_evaluator(model);
  std::vector<BenchRecord> out;
  for (int t = 1; t <= t_max; ++t) {
    Tensor<S> exact;
    auto rec = detail::time_region(opt, b, [&] { exact = exact_directional_derivative<S>(energy, x, v, t); });
    rec.method = "exact-nested";
    rec.order = t;
    rec.rel_err = 0.0;
    out.push_back(rec);

    const auto stencil = solve_symmetric(t);
    for (auto mode : {FdMode::kConcatenated, FdMode::kParallel}) {
      Tensor<S> approx;
      auto fd = detail::time_region(opt, b, [&] { approx = fd_directional(eval, x, v, stencil, mode).values; });
      fd.method = mode == FdMode::kConcatenated ? "fd" : "fd-parallel";
      fd.order = t;
      fd.rel_err = batch_relative_error(approx, exact);
      out.push_back(fd);
    }
  }
  return out;
}

/// Median wall time of one loss evaluation plus parameter gradient.
template <class M>
BenchRecord bench_objective(const M& model, ObjectiveKind kind, const ObjectiveBatch<typename M::Scalar>& batch,
                            const BenchOptions& opt = {}) {
  auto rec = detail::time_region(opt, batch.x.dim(0), [&] {
    const auto est = evaluate_objective(kind, model, batch);
    parameter_gradient(est.loss, model.parameters());
  });
  rec.method = objective_name(kind);
  return rec;
}

inline const char* bench_header() { return "method,T,wall_ms,fwd_evals,deriv_passes,peak_bytes,rel_err"; }

inline void write_bench_row(std::ostream& os, const BenchRecord& r) {
  os << r.method << ',' << r.order << ',' << format_double(r.wall_ms) << ',' << format_double(r.fwd_evals) << ','
     << r.deriv_passes << ',' << r.peak_bytes << ',' << (std::isnan(r.rel_err) ? "" : format_double(r.rel_err))
     << '\n';
}

/// Wall-time ratio with the threshold it is compared against (soft: hardware dependent).
struct SpeedRatio {
  std::string numerator, denominator;
  double ratio = 0, threshold = 0;
  bool pass() const { return ratio <= threshold; }
};

inline const char* ratio_header() { return "numerator,denominator,ratio,threshold,soft_pass"; }

inline void write_ratio_row(std::ostream& os, const SpeedRatio& r) {
  os << r.numerator << ',' << r.denominator << ',' << format_double(r.ratio) << ','
     << format_double(r.threshold) << ',' << (r.pass() ? "yes" : "no") << '\n';
}

/// fd-ssm vs ssm and fd-dsm vs dsm-sliced, from bench_objective records.
inline std::vector<SpeedRatio> speed_ratios(const std::vector<BenchRecord>& recs) {
  auto find = [&](const std::string& m) -> const BenchRecord* {
    for (const auto& r : recs)
      if (r.method == m) return &r;
    return nullptr;
  };
  std::vector<SpeedRatio> out;
  const std::pair<const char*, const char*> pairs[] = {{"fd-ssm", "ssm"}, {"fd-dsm", "dsm-sliced"}};
  const double thresholds[] = {0.67, 0.9};
  for (std::size_t i = 0; i < 2; ++i) {
    const auto* a = find(pairs[i].first);
    const auto* b = find(pairs[i].second);
    if (a && b) out.push_back({pairs[i].first, pairs[i].second, a->wall_ms / b->wall_ms, thresholds[i]});
  }
  return out;
}

/// Whitespace-separated columns for gnuplot: T exact_ms fd_ms fd_parallel_ms exact_bytes fd_bytes fd_rel_err.
inline void write_sweep_gnuplot(std::ostream& os, const std::vector<BenchRecord>& recs) {
  os << "# T exact_ms fd_ms fd_parallel_ms exact_peak_bytes fd_peak_bytes fd_rel_err\n";
  int max_t = 0;
  for (const auto& r : recs) max_t = std::max(max_t, r.order);
  for (int t = 1; t <= max_t; ++t) {
    const BenchRecord *e = nullptr, *f = nullptr, *p = nullptr;
    for (const auto& r : recs) {
      if (r.order != t) continue;
      if (r.method == "exact-nested") e = &r;
      if (r.method == "fd") f = &r;
      if (r.method == "fd-parallel") p = &r;
    }
    if (!e || !f || !p) continue;
    os << t << ' ' << format_double(e->wall_ms) << ' ' << format_double(f->wall_ms) << ' ' << format_double(p->wall_ms)
       << ' ' << e->peak_bytes << ' ' << f->peak_bytes << ' ' << format_double(f->rel_err) << '\n';
  }
}

}  // namespace fdsm
