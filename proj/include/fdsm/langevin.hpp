#pragma once

// (Annealed) unadjusted Langevin dynamics driven by a model's score.

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fdsm/densities.hpp"
#include "fdsm/models.hpp"
#include "fdsm/rng.hpp"

namespace fdsm {

/// Geometric noise levels sigma_1 > ... > sigma_L; level i uses step base * (sigma_i / sigma_L)^2.
struct AnnealSchedule {
  double sigma_first = 1.0;
  double sigma_last = 1.0;
  std::size_t levels = 1;
  std::size_t steps_per_level = 100;  // 0 leaves the chains at their initialization
  double base_step = 1e-3;

  std::vector<double> sigmas() const {
    validate();
    std::vector<double> out(levels);
    for (std::size_t i = 0; i < levels; ++i) {
      const double t = levels == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(levels - 1);
      out[i] = sigma_first * std::pow(sigma_last / sigma_first, t);
    }
    return out;
  }

  std::vector<double> step_sizes() const {
    std::vector<double> out;
    for (double s : sigmas()) out.push_back(base_step * (s / sigma_last) * (s / sigma_last));
    return out;
  }

  void validate() const {
    if (levels < 1) throw std::invalid_argument("AnnealSchedule: need at least one noise level");
    if (!(sigma_first > 0) || !(sigma_last > 0)) throw std::invalid_argument("AnnealSchedule: sigmas must be > 0");
    if (levels > 1 && !(sigma_first > sigma_last))
      throw std::invalid_argument("AnnealSchedule: sigmas must be strictly decreasing");
    if (levels == 1 && sigma_first != sigma_last)
      throw std::invalid_argument("AnnealSchedule: a single level needs sigma_first == sigma_last");
    if (!(base_step > 0)) throw std::invalid_argument("AnnealSchedule: base step must be > 0");
  }
};

class LangevinDiverged : public std::runtime_error {
 public:
  LangevinDiverged(std::size_t level, std::size_t step, std::size_t chain, double value)
      : std::runtime_error("langevin: chain " + std::to_string(chain) + " left the box (|x| = " +
                           std::to_string(std::abs(value)) + ") at level " + std::to_string(level) + ", step " +
                           std::to_string(step)),
        level_(level),
        step_(step),
        chain_(chain) {}
  std::size_t level() const { return level_; }
  std::size_t step() const { return step_; }
  std::size_t chain() const { return chain_; }

 private:
  std::size_t level_, step_, chain_;
};

inline constexpr double kLangevinDivergence = 1e3;

/// Runs every chain from `init`; chain i draws its noise from its own stream.
template <class M>
Tensor<typename M::Scalar> langevin_from(const M& model, Tensor<typename M::Scalar> init,
                                         const AnnealSchedule& schedule, std::uint64_t seed,
                                         std::size_t threads = 1) {
  using S = typename M::Scalar;
  const auto etas = schedule.step_sizes();
  const std::size_t n = init.dim(0), d = init.dim(1);
  if (d != model.input_dim()) throw ShapeError("langevin", init.shape(), {n, model.input_dim()});
  const std::size_t shards = std::max<std::size_t>(1, std::min(threads, n));

  auto run_shard = [&](std::size_t begin, std::size_t count) {
    std::vector<std::mt19937_64> rngs;
    rngs.reserve(count);
    for (std::size_t c = 0; c < count; ++c) rngs.push_back(make_stream(seed, begin + c));
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor<S> x({count, d});
    std::copy_n(init.data() + begin * d, count * d, x.data());
    for (std::size_t level = 0; level < etas.size(); ++level) {
      const double eta = etas[level], noise = std::sqrt(eta);
      for (std::size_t step = 0; step < schedule.steps_per_level; ++step) {
        const auto s = model_score(model, x);
        for (std::size_t c = 0; c < count; ++c)
          for (std::size_t j = 0; j < d; ++j) {
            const double next = x(c, j) + 0.5 * eta * s(c, j) + noise * normal(rngs[c]);
            if (!(std::abs(next) <= kLangevinDivergence)) throw LangevinDiverged(level, step, begin + c, next);
            x(c, j) = static_cast<S>(next);
          }
      }
    }
    std::copy_n(x.data(), count * d, init.data() + begin * d);
  };

  if (shards == 1) {
    run_shard(0, n);
    return init;
  }
  std::vector<std::exception_ptr> errors(shards);
  std::vector<std::thread> pool;
  for (std::size_t k = 0, at = 0; k < shards; ++k) {
    const std::size_t count = n / shards + (k < n % shards ? 1 : 0);
    pool.emplace_back([&, k, at, count] {
      try {
        run_shard(at, count);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
    at += count;
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return init;
}

/// Uniform initialization in the toy-data box [-3, 3]^d.
template <class S>
Tensor<S> langevin_init(std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("langevin: n must be >= 1");
  auto rng = make_stream(seed, ~std::uint64_t{0});
  std::uniform_real_distribution<double> u(ToyDensity::kBoxLo, ToyDensity::kBoxHi);
  Tensor<S> x({n, d});
  for (auto& v : x.values()) v = static_cast<S>(u(rng));
  return x;
}

/// n samples: uniform init in the data box, then the schedule.
template <class M>
Tensor<typename M::Scalar> langevin(const M& model, std::size_t n, const AnnealSchedule& schedule, std::uint64_t seed,
                                    std::size_t threads = 1) {
  return langevin_from(model, langevin_init<typename M::Scalar>(n, model.input_dim(), seed), schedule, seed, threads);
}

}  // namespace fdsm
