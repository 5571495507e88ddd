#pragma once

// Mini-batch training loop: config, epsilon schedule, sharded gradients, CSV log.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "fdsm/csv.hpp"
#include "fdsm/densities.hpp"
#include "fdsm/models.hpp"
#include "fdsm/objectives.hpp"
#include "fdsm/optim.hpp"
#include "fdsm/rng.hpp"

namespace fdsm {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

class ConfigError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_unsigned(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size())
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}


}  // namespace detail

/// Comma-separated list of positive integers, e.g. "256,256,256".
inline std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto w = detail::parse_unsigned("hidden", detail::trim(item));
    if (w == 0) throw ConfigError("config: hidden widths must be positive");
    out.push_back(w);
  }
  if (out.empty()) throw ConfigError("config: 'hidden' needs at least one width");
  return out;
}

/// Constant epsilon, or linear decay from eps0 to eps_min over the run.
struct EpsilonSchedule {
  double eps0 = 0.1;
  bool linear = false;
  double eps_min = 0.0;

  static EpsilonSchedule parse(double eps0, const std::string& spec) {
    EpsilonSchedule s{eps0, false, eps0};
    if (spec == "none" || spec.empty()) return s;
    const std::string prefix = "linear:";
    if (spec.rfind(prefix, 0) != 0)
      throw ConfigError("config: eps_decay must be 'none' or 'linear:<eps_min>', got '" + spec + "'");
    s.linear = true;
    s.eps_min = detail::parse_double("eps_decay", spec.substr(prefix.size()));
    if (!(s.eps_min > 0) || s.eps_min > eps0) throw ConfigError("config: eps_min must lie in (0, eps]");
    return s;
  }

  /// Epsilon used for step `it` (0-based) of `total`.
  double at(std::size_t it, std::size_t total) const {
    if (!linear || total <= 1) return eps0;
    const double f = static_cast<double>(it) / static_cast<double>(total - 1);
    return eps0 + (eps_min - eps0) * f;
  }
};

struct TrainConfig {
  std::string objective = "fd-ssm";
  std::string dataset = "mog8";
  std::size_t batch = 128;
  std::size_t iterations = 5000;
  std::string optimizer = "adam";
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  double eps = 0.1;
  std::string eps_decay = "none";
  double sigma = 0.1;
  std::size_t eval_every = 100;
  std::string hidden = "256,256,256";
  std::size_t eval_batch = 512;
  std::size_t fisher_samples = 2000;
  std::size_t threads = 1;  // 0 = hardware concurrency
  std::string precision = "f64";

  /// Set one key; dashes and underscores are interchangeable.
  void set(std::string key, const std::string& raw) {
    std::replace(key.begin(), key.end(), '-', '_');
    const std::string v = detail::trim(raw);
    if (key == "objective") objective = v;
    else if (key == "dataset") dataset = v;
    else if (key == "batch") batch = detail::parse_unsigned(key, v);
    else if (key == "iterations") iterations = detail::parse_unsigned(key, v);
    else if (key == "optimizer") optimizer = v;
    else if (key == "lr") lr = detail::parse_double(key, v);
    else if (key == "beta1") beta1 = detail::parse_double(key, v);
    else if (key == "beta2") beta2 = detail::parse_double(key, v);
    else if (key == "seed") seed = detail::parse_unsigned(key, v);
    else if (key == "eps") eps = detail::parse_double(key, v);
    else if (key == "eps_decay") eps_decay = v;
    else if (key == "sigma") sigma = detail::parse_double(key, v);
    else if (key == "eval_every") eval_every = detail::parse_unsigned(key, v);
    else if (key == "hidden") hidden = v;
    else if (key == "eval_batch") eval_batch = detail::parse_unsigned(key, v);
    else if (key == "fisher_samples") fisher_samples = detail::parse_unsigned(key, v);
    else if (key == "threads") threads = detail::parse_unsigned(key, v);
    else if (key == "precision") precision = v;
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  /// key = value lines; '#' starts a comment.
  void load(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
      set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    load(in);
  }

  /// Every key with its resolved value, in a fixed order.
  std::vector<std::pair<std::string, std::string>> items() const {
      return {{"objective", objective},
            {"dataset", dataset},
            {"batch", std::to_string(batch)},
            {"iterations", std::to_string(iterations)},
            {"optimizer", optimizer},
            {"lr", format_double(lr)},
            {"beta1", format_double(beta1)},
            {"beta2", format_double(beta2)},
            {"seed", std::to_string(seed)},
            {"eps", format_double(eps)},
            {"eps_decay", eps_decay},
            {"sigma", format_double(sigma)},
            {"eval_every", std::to_string(eval_every)},
            {"hidden", hidden},
            {"eval_batch", std::to_string(eval_batch)},
            {"fisher_samples", std::to_string(fisher_samples)},
            {"threads", std::to_string(threads)},
            {"precision", precision}};
  }

  void validate() const {
    parse_objective(objective);
    parse_dataset(dataset);
    parse_optimizer(optimizer);
    parse_widths(hidden);
    EpsilonSchedule::parse(eps, eps_decay);
    if (batch < 1) throw ConfigError("config: batch must be >= 1");
    if (!(lr > 0)) throw ConfigError("config: lr must be > 0");
    if (!(eps > 0)) throw ConfigError("config: eps must be > 0");
    if (!(sigma > 0)) throw ConfigError("config: sigma must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("config: betas must lie in [0, 1)");
    if (eval_every < 1) throw ConfigError("config: eval_every must be >= 1");
    if (eval_batch < 1 || fisher_samples < 1) throw ConfigError("config: eval_batch and fisher_samples must be >= 1");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("config: precision must be f32 or f64, got '" + precision + "'");
  }
};

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------------------
// Log
// ---------------------------------------------------------------------------

struct LogRow {
  std::size_t iter = 0;
  double objective = 0;  // training objective on the held-out batch
  double sm_exact = 0;   // exact SM loss on the held-out batch
  double fisher = 0;
  double fisher_se = 0;
  double epsilon = 0;
  double wall_ms_per_iter = 0;
  EvalCounters counters;  // last training step (loss + parameter gradient)
  std::string status = "ok";
};

inline const char* log_header() {
  return "iter,objective,loss,sm_exact,fisher,fisher_se,epsilon,wall_ms_per_iter,fwd_rows,deriv_passes,"
         "nested_passes,max_tape_depth,status";
}

/// One CSV row; `objective_token` fills the objective column.
inline void write_log_row(std::ostream& os, const std::string& objective_token, const LogRow& r) {
  os << r.iter << ',' << objective_token << ',' << format_double(r.objective) << ',' << format_double(r.sm_exact)
     << ',' << format_double(r.fisher) << ',' << format_double(r.fisher_se) << ',' << format_double(r.epsilon) << ','
     << format_double(r.wall_ms_per_iter) << ',' << r.counters.forward_rows << ',' << r.counters.derivative_passes()
     << ',' << r.counters.nested_passes << ',' << r.counters.max_tape_depth << ',' << r.status << '\n';
}

// ---------------------------------------------------------------------------
// Step
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Tensor<S> take_rows(const Tensor<S>& t, std::size_t begin, std::size_t count) {
  auto shape = t.shape();
  const std::size_t stride = t.size() / shape.at(0);
  shape[0] = count;
  Tensor<S> out(shape);
  std::copy_n(t.data() + begin * stride, count * stride, out.data());
  return out;
}

template <class S>
ObjectiveBatch<S> slice_batch(const ObjectiveBatch<S>& b, std::size_t begin, std::size_t count) {
  ObjectiveBatch<S> out;
  out.x = take_rows(b.x, begin, count);
  out.dir.v = take_rows(b.dir.v, begin, count);
  out.dir.epsilon = b.dir.epsilon;
  out.x_tilde = take_rows(b.x_tilde, begin, count);
  out.sigma = b.sigma;
  return out;
}

}  // namespace detail

template <class S>
struct StepGradient {
  double loss = 0;
  std::vector<Tensor<S>> grads;
  EvalCounters counters;
};

/// Loss value and parameter gradient of one objective on one batch.
/// With threads > 1 the batch is split into contiguous shards; shard gradients are
/// weighted by shard size and summed in shard order, so the result does not depend on scheduling.
template <class M>
StepGradient<typename M::Scalar> objective_gradient(ObjectiveKind kind, const M& model,
                                                    const ObjectiveBatch<typename M::Scalar>& batch,
                                                    std::size_t threads = 1) {
  using S = typename M::Scalar;
  const std::size_t rows = batch.x.dim(0);
  const std::size_t shards = std::clamp<std::size_t>(threads, 1, rows);
  auto run = [&](const ObjectiveBatch<S>& b) {
    StepGradient<S> out;
    CounterScope scope;
    const auto est = evaluate_objective(kind, model, b);
    out.loss = est.value;
    out.grads = parameter_gradient(est.loss, model.parameters());
    out.counters = scope.delta();
    return out;
  };
  if (shards == 1) return run(batch);

  std::vector<StepGradient<S>> parts(shards);
  std::vector<std::size_t> begin(shards), count(shards);
  for (std::size_t k = 0, at = 0; k < shards; ++k) {
    count[k] = rows / shards + (k < rows % shards ? 1 : 0);
    begin[k] = at;
    at += count[k];
  }
  std::vector<std::exception_ptr> errors(shards);
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < shards; ++k) {
    pool.emplace_back([&, k] {
      try {
        parts[k] = run(detail::slice_batch(batch, begin[k], count[k]));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  StepGradient<S> out;
  out.grads.reserve(parts[0].grads.size());
  for (const auto& g : parts[0].grads) out.grads.emplace_back(g.shape(), S(0));
  for (std::size_t k = 0; k < shards; ++k) {
    const double w = static_cast<double>(count[k]) / static_cast<double>(rows);
    out.loss += w * parts[k].loss;
    for (std::size_t i = 0; i < out.grads.size(); ++i)
      for (std::size_t j = 0; j < out.grads[i].size(); ++j)
        out.grads[i][j] = static_cast<S>(out.grads[i][j] + w * parts[k].grads[i][j]);
    out.counters.merge(parts[k].counters);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::size_t iter, double epsilon, std::string status)
      : std::runtime_error(what), iter_(iter), epsilon_(epsilon), status_(std::move(status)) {}
  std::size_t iter() const { return iter_; }
  double epsilon() const { return epsilon_; }
  const std::string& status() const { return status_; }

 private:
  std::size_t iter_;
  double epsilon_;
  std::string status_;
};

/// RNG stream ids derived from the master seed.
enum : std::uint64_t { kStreamInit = 1, kStreamData, kStreamObjective, kStreamHeldOut, kStreamFisher };

/// Owns the model, optimizer state and RNG streams for one run.
template <class M>
class Trainer {
 public:
  using S = typename M::Scalar;

  Trainer(const TrainConfig& cfg, M model)
      : cfg_(cfg),
        kind_(parse_objective(cfg.objective)),
        density_(parse_dataset(cfg.dataset)),
        schedule_(EpsilonSchedule::parse(cfg.eps, cfg.eps_decay)),
        model_(std::move(model)),
        opt_(OptimizerConfig{parse_optimizer(cfg.optimizer), cfg.lr, cfg.beta1, cfg.beta2}),
        data_rng_(make_stream(cfg.seed, kStreamData)),
        obj_rng_(make_stream(cfg.seed, kStreamObjective)),
        threads_(resolve_threads(cfg.threads)) {
    cfg_.validate();
    if (ScoreModel<M> != needs_score_model(kind_) && kind_ != ObjectiveKind::kSm)
      throw ModelMismatch("objective '" + cfg.objective + "' does not match the model kind");
    auto held_rng = make_stream(cfg.seed, kStreamHeldOut);
    held_out_ = make_batch(density_.sample(cfg.eval_batch, held_rng).template cast<S>(), cfg.eps, cfg.sigma, held_rng);
  }

  /// One optimizer update. Throws TrainingAborted on a non-finite loss or gradient.
  const StepGradient<S>& step() {
    const double eps = schedule_.at(iter_, cfg_.iterations);
    auto x = density_.sample(cfg_.batch, data_rng_).template cast<S>();
    const auto batch = make_batch(std::move(x), eps, cfg_.sigma, obj_rng_);
    last_ = objective_gradient(kind_, model_, batch, threads_);
    last_eps_ = eps;
    ++iter_;
    if (!std::isfinite(last_.loss))
      throw TrainingAborted("non-finite loss at iteration " + std::to_string(iter_) + " (epsilon " +
                                format_double(eps) + ")",
                            iter_, eps, "nonfinite-loss");
    try {
      opt_.step(model_.parameters(), last_.grads, model_.parameter_names());
    } catch (const NonFiniteGradient& e) {
      throw TrainingAborted(std::string(e.what()) + " at iteration " + std::to_string(iter_) + " (epsilon " +
                                format_double(eps) + ")",
                            iter_, eps, "nonfinite-grad:" + e.block());
    }
    return last_;
  }

  /// Metrics on the held-out batch and the Fisher sample; counters from the last step.
  LogRow evaluate() const {
    LogRow r;
    r.iter = iter_;
    r.epsilon = iter_ == 0 ? schedule_.at(0, cfg_.iterations) : last_eps_;
    r.counters = last_.counters;
    {
      auto b = held_out_;
      b.dir = held_out_.dir.scaled(r.epsilon / held_out_.dir.epsilon);
      r.objective = evaluate_objective(kind_, model_, b).value;
    }
    r.sm_exact = sm_exact(model_, held_out_.x, false).value;
    const auto f = density_.fisher_divergence(
        [&](const Tensor<double>& x) { return model_score(model_, x.template cast<S>()).template cast<double>(); },
        cfg_.fisher_samples, derive_seed(cfg_.seed, kStreamFisher));
    r.fisher = f.value;
    r.fisher_se = f.standard_error;
    return r;
  }

  std::size_t iteration() const { return iter_; }
  const M& model() const { return model_; }
  M& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  ObjectiveKind objective() const { return kind_; }

 private:
  TrainConfig cfg_;
  ObjectiveKind kind_;
  ToyDensity density_;
  EpsilonSchedule schedule_;
  M model_;
  Optimizer<S> opt_;
  std::mt19937_64 data_rng_, obj_rng_;
  std::size_t threads_;
  ObjectiveBatch<S> held_out_;
  StepGradient<S> last_;
  double last_eps_ = 0;
  std::size_t iter_ = 0;
};

template <class S>
using TrainedModel = std::variant<MlpEnergyModel<S>, MlpScoreModel<S>>;

template <class S>
struct TrainResult {
  TrainedModel<S> model;
  std::vector<LogRow> rows;
  bool aborted = false;
  std::string diagnostic;
};

using RowCallback = std::function<void(const LogRow&)>;

/// Runs the loop on an existing trainer: initial row, one row every eval_every steps and at the end.
template <class M>
std::pair<std::vector<LogRow>, std::string> run_training(Trainer<M>& trainer, const RowCallback& on_row = {}) {
  std::vector<LogRow> rows;
  auto emit = [&](LogRow r) {
    if (on_row) on_row(r);
    rows.push_back(std::move(r));
  };
  emit(trainer.evaluate());
  const auto& cfg = trainer.config();
  double ms = 0;
  std::size_t since = 0;
  for (std::size_t it = trainer.iteration(); it < cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      trainer.step();
    } catch (const TrainingAborted& e) {
      LogRow r;
      r.iter = e.iter();
      r.epsilon = e.epsilon();
      r.objective = r.sm_exact = r.fisher = r.fisher_se = std::numeric_limits<double>::quiet_NaN();
      r.wall_ms_per_iter = 0;
      r.status = e.status();
      emit(std::move(r));
      return {std::move(rows), e.what()};
    }
    ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++since;
    if (trainer.iteration() % cfg.eval_every == 0 || trainer.iteration() == cfg.iterations) {
      auto r = trainer.evaluate();
      r.wall_ms_per_iter = ms / static_cast<double>(since);
      ms = 0;
      since = 0;
      emit(std::move(r));
    }
  }
  return {std::move(rows), ""};
}

/// Builds the model named by the config (score model for ssmvr-type objectives), then trains it.
template <class S>
TrainResult<S> train(const TrainConfig& cfg, const RowCallback& on_row = {}) {
  cfg.validate();
  const auto kind = parse_objective(cfg.objective);
  const auto hidden = parse_widths(cfg.hidden);
  const auto init_seed = derive_seed(cfg.seed, kStreamInit);
  auto finish = [&](auto trainer) {
    auto [rows, diag] = run_training(trainer, on_row);
    TrainResult<S> out{TrainedModel<S>(std::move(trainer.model())), std::move(rows), !diag.empty(), std::move(diag)};
    return out;
  };
  if (needs_score_model(kind)) return finish(Trainer(cfg, MlpScoreModel<S>::init(2, hidden, init_seed)));
  return finish(Trainer(cfg, MlpEnergyModel<S>::init(2, hidden, init_seed)));
}

}  // namespace fdsm
