// fdsm: command-line driver for stencils, approximation sweeps, training,
// evaluation, sampling, benchmarks and gradient-angle checks.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fdsm/bench.hpp"
#include "fdsm/checkpoint.hpp"
#include "fdsm/csv.hpp"
#include "fdsm/densities.hpp"
#include "fdsm/directional.hpp"
#include "fdsm/langevin.hpp"
#include "fdsm/models.hpp"
#include "fdsm/objectives.hpp"
#include "fdsm/rng.hpp"
#include "fdsm/stats.hpp"
#include "fdsm/stencil.hpp"
#include "fdsm/trainer.hpp"

#ifndef FDSM_BUILD_ID
#define FDSM_BUILD_ID "unknown"
#endif

namespace {

using namespace fdsm;

class UsageError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string precision = "f64";
  std::string out = "out";

  std::uint64_t seed_or_zero() const { return seed.value_or(0); }
};

/// FDSM_THREADS: unset means 1, 0 means all hardware threads.
std::size_t env_threads() {
  const char* e = std::getenv("FDSM_THREADS");
  if (!e || !*e) return 1;
  try {
    return resolve_threads(detail::parse_unsigned("FDSM_THREADS", e));
  } catch (const ConfigError& err) {
    throw UsageError(err.what());
  }
}

std::vector<double> parse_grid(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const double v = detail::parse_double(what, detail::trim(item));
    if (!(v > 0)) throw UsageError(std::string(what) + ": values must be > 0");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(std::string(what) + ": empty list");
  return out;
}

std::vector<std::string> split_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(detail::trim(item));
  return out;
}

using Items = std::vector<std::pair<std::string, std::string>>;

/// Output directory plus the manifest every file in it points back to.
class Run {
 public:
  Run(const Globals& g, const std::string& subcommand, const Items& resolved) : dir_(g.out), name_(subcommand) {
    std::filesystem::create_directories(dir_);
    std::ofstream m(path(manifest_file()));
    if (!m) throw std::runtime_error("cannot write manifest in '" + dir_ + "'");
    m << "subcommand = " << subcommand << "\n"
      << "seed = " << g.seed_or_zero() << "\n"
      << "precision = " << g.precision << "\n"
      << "build = " << FDSM_BUILD_ID << "\n"
      << "out = " << dir_ << "\n";
    for (const auto& [k, v] : resolved)
      if (k != "seed" && k != "precision") m << k << " = " << v << "\n";
  }

  std::string manifest_file() const { return name_ + ".manifest"; }
  std::string path(const std::string& file) const { return (std::filesystem::path(dir_) / file).string(); }

  /// Opens a CSV whose first line names the manifest, followed by the fixed header.
  std::ofstream csv(const std::string& file, const std::string& header) const {
    std::ofstream os(path(file));
    if (!os) throw std::runtime_error("cannot write '" + path(file) + "'");
    os << "# manifest: " << manifest_file() << "\n" << header << "\n";
    return os;
  }

 private:
  std::string dir_, name_;
};

// ---------------------------------------------------------------------------
// stencil
// ---------------------------------------------------------------------------

int cmd_stencil(const Globals& g, int order, const std::string& alphas_csv) {
  std::vector<double> alphas;
  if (!alphas_csv.empty()) alphas = parse_grid(alphas_csv, "--alphas");
  if (order < 1) throw UsageError("--order must be >= 1");
  const auto st = solve_symmetric(order, alphas);
  Run run(g, "stencil", {{"order", std::to_string(order)}, {"alphas", alphas_csv.empty() ? "default" : alphas_csv}});
  auto os = run.csv("stencil.csv", "T,K,alpha,beta");
  std::cout << "T,K,alpha,beta\n";
  for (std::size_t k = 0; k < st.alphas.size(); ++k) {
    std::ostringstream row;
    row << order << ',' << st.half_width << ',' << format_double(st.alphas[k]) << ',' << format_double(st.betas[k])
        << '\n';
    os << row.str();
    std::cout << row.str();
  }
  for (const auto& w : st.warnings) std::cerr << "warning: " << w << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// approx
// ---------------------------------------------------------------------------

template <class S>
int cmd_approx(const Globals& g, const std::string& function, int order, const std::string& grid_csv,
               std::size_t batch, const std::string& hidden) {
  if (order < 1) throw UsageError("--order must be >= 1");
  const auto grid = parse_grid(grid_csv, "--eps-grid");
  const auto seed = g.seed_or_zero();
  using AnyEnergy = std::variant<MlpEnergyModel<S>, QuadraticEnergyModel<S>, LogSumExpEnergy<S>>;
  AnyEnergy model;
  if (function == "mlp") model = MlpEnergyModel<S>::init(2, parse_widths(hidden), derive_seed(seed, kStreamInit));
  else if (function == "quadratic") model = QuadraticEnergyModel<S>(2);
  else if (function == "logsumexp") model = LogSumExpEnergy<S>::random(2, 4, derive_seed(seed, kStreamInit));
  else throw UsageError("unknown function '" + function + "' (valid: mlp, quadratic, logsumexp)");

  Run run(g, "approx",
          {{"function", function}, {"order", std::to_string(order)}, {"eps_grid", grid_csv},
           {"batch", std::to_string(batch)}, {"hidden", hidden}});
  auto os = run.csv("approx.csv", "function,T,eps,abs_err,rel_err,fwd_evals");

  auto rng = make_stream(seed, kStreamData);
  const auto x = ToyDensity(DatasetKind::kGauss2).sample(batch, rng).template cast<S>();
  const auto unit = sample_direction<S>(batch, 2, 1.0, rng);
  const auto st = solve_symmetric(order);
  std::visit(
      [&](const auto& m) {
        auto energy = [&m](const Var<S>& z) { return m.energy(z); };
        const auto eval = energy_evaluator(m);
        for (double eps : grid) {
          const auto v = unit.scaled(eps).v;
          const auto fd = fd_directional(eval, x, v, st).values;
          const auto exact = exact_directional_derivative<S>(energy, x, v, order);
          // report errors of the derivative along the unit direction
          const double scale = std::pow(eps, order);
          double abs_err = 0;
          for (std::size_t i = 0; i < fd.size(); ++i)
            abs_err = std::max(abs_err, std::abs(static_cast<double>(fd[i]) - static_cast<double>(exact[i])) / scale);
          os << function << ',' << order << ',' << format_double(eps) << ',' << format_double(abs_err) << ','
             << format_double(batch_relative_error(fd, exact)) << ',' << st.evaluations() << '\n';
        }
      },
      model);
  std::cout << "wrote " << run.path("approx.csv") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <class S>
int cmd_train(const Globals& g, const TrainConfig& cfg) {
  Run run(g, "train", cfg.items());
  auto log = run.csv("train_log.csv", log_header());
  const std::string tok = cfg.objective;
  auto res = train<S>(cfg, [&](const LogRow& r) {
    write_log_row(log, tok, r);
    log.flush();
    std::cerr << "iter " << r.iter << "  loss " << format_double(r.objective) << "  fisher " << format_double(r.fisher)
              << "  " << r.status << "\n";
  });
  std::visit([&](const auto& m) { save_checkpoint(run.path("checkpoint.fdsm"), make_checkpoint(m)); }, res.model);
  if (res.aborted) {
    std::cerr << "error: training aborted: " << res.diagnostic << "\n";
    return 2;
  }
  const auto& last = res.rows.back();
  std::cout << "final iter " << last.iter << " sm_exact " << format_double(last.sm_exact) << " fisher "
            << format_double(last.fisher) << " +- " << format_double(last.fisher_se) << "\n"
            << "wrote " << run.path("train_log.csv") << " and " << run.path("checkpoint.fdsm") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <class S>
int cmd_eval(const Globals& g, const std::string& ckpt_path, const std::string& dataset, std::size_t fisher_n,
             std::size_t eval_batch) {
  const auto kind = parse_dataset(dataset);
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto model = model_from_checkpoint<S>(ckpt);
  Run run(g, "eval",
          {{"checkpoint", ckpt_path}, {"dataset", dataset}, {"fisher_samples", std::to_string(fisher_n)},
           {"eval_batch", std::to_string(eval_batch)}});
  auto os = run.csv("eval.csv", "checkpoint,dataset,model,fisher,fisher_se,sm_exact,samples");
  const ToyDensity density(kind);
  const auto seed = g.seed_or_zero();
  std::visit(
      [&](const auto& m) {
        const auto f = density.fisher_divergence(
            [&](const Tensor<double>& x) { return model_score(m, x.template cast<S>()).template cast<double>(); },
            fisher_n, derive_seed(seed, kStreamFisher));
        const auto held = density.sample(eval_batch, derive_seed(seed, kStreamHeldOut)).template cast<S>();
        const double sm = sm_exact(m, held, false).value;
        const char* model_kind = ScoreModel<std::decay_t<decltype(m)>> ? "score" : "energy";
        os << ckpt_path << ',' << dataset << ',' << model_kind << ',' << format_double(f.value) << ','
           << format_double(f.standard_error) << ',' << format_double(sm) << ',' << f.samples << '\n';
        std::cout << "fisher " << format_double(f.value) << " +- " << format_double(f.standard_error) << "  sm_exact "
                  << format_double(sm) << "\n";
      },
      model);
  return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

template <class S>
int cmd_sample(const Globals& g, const std::string& ckpt_path, std::size_t n, const AnnealSchedule& sched) {
  sched.validate();
  if (n == 0) throw UsageError("-n must be >= 1");
  const auto model = model_from_checkpoint<S>(load_checkpoint(ckpt_path));
  Run run(g, "sample",
          {{"checkpoint", ckpt_path}, {"n", std::to_string(n)}, {"sigma_first", format_double(sched.sigma_first)},
           {"sigma_last", format_double(sched.sigma_last)}, {"levels", std::to_string(sched.levels)},
           {"steps_per_level", std::to_string(sched.steps_per_level)}, {"base_step", format_double(sched.base_step)},
           {"threads", std::to_string(env_threads())}});
  const auto x = std::visit([&](const auto& m) { return langevin(m, n, sched, g.seed_or_zero(), env_threads()); }, model);
  std::string header;
  for (std::size_t j = 0; j < x.dim(1); ++j) header += (j ? "," : "") + (x.dim(1) == 2 ? std::string(j ? "y" : "x") : "x" + std::to_string(j));
  auto os = run.csv("samples.csv", header);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t j = 0; j < x.dim(1); ++j) os << (j ? "," : "") << format_double(static_cast<double>(x(i, j)));
    os << '\n';
  }
  std::cout << "wrote " << n << " samples to " << run.path("samples.csv") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
  int t_max = 5;
  double eps = 0.1;
  double sigma = 0.1;
  std::size_t batch = 128;
  std::string hidden = "256,256,256";
  std::size_t repeats = 20;
  std::size_t warmups = 5;
  std::string objectives = "fd-ssm,ssm,fd-dsm,dsm-sliced";

  Items items() const {
    return {{"t_max", std::to_string(t_max)},     {"eps", format_double(eps)},
            {"sigma", format_double(sigma)},      {"batch", std::to_string(batch)},
            {"hidden", hidden},                   {"repeats", std::to_string(repeats)},
            {"warmups", std::to_string(warmups)}, {"objectives", objectives}};
  }
};

template <class S>
Tensor<S> bench_points(std::uint64_t seed, std::size_t batch) {
  return ToyDensity(DatasetKind::kMog8).sample(batch, derive_seed(seed, kStreamData)).template cast<S>();
}

template <class S>
int cmd_bench_sweep(const Globals& g, const BenchArgs& a) {
  if (a.t_max < 2) throw UsageError("--t-max must be >= 2");
  Run run(g, "bench-order-sweep", a.items());
  const auto seed = g.seed_or_zero();
  const auto model = MlpEnergyModel<S>::init(2, parse_widths(a.hidden), derive_seed(seed, kStreamInit));
  const auto recs = bench_order_sweep(model, bench_points<S>(seed, a.batch), a.t_max, a.eps,
                                      derive_seed(seed, kStreamObjective), {a.repeats, a.warmups});
  auto os = run.csv("bench_order.csv", bench_header());
  for (const auto& r : recs) write_bench_row(os, r);
  std::ofstream dat(run.path("bench_order.dat"));
  dat << "# manifest: " << run.manifest_file() << "\n";
  write_sweep_gnuplot(dat, recs);
  std::cout << "wrote " << run.path("bench_order.csv") << " and " << run.path("bench_order.dat") << "\n";
  return 0;
}

template <class S>
int cmd_bench_objective(const Globals& g, const BenchArgs& a) {
  std::vector<ObjectiveKind> kinds;
  for (const auto& t : split_tokens(a.objectives)) kinds.push_back(parse_objective(t));
  Run run(g, "bench-objective", a.items());
  const auto seed = g.seed_or_zero();
  const auto hidden = parse_widths(a.hidden);
  const auto energy = MlpEnergyModel<S>::init(2, hidden, derive_seed(seed, kStreamInit));
  const auto score = MlpScoreModel<S>::init(2, hidden, derive_seed(seed, kStreamInit));
  auto rng = make_stream(seed, kStreamObjective);
  const auto batch = make_batch(bench_points<S>(seed, a.batch), a.eps, a.sigma, rng);
  std::vector<BenchRecord> recs;
  for (auto k : kinds) {
    recs.push_back(needs_score_model(k) ? bench_objective(score, k, batch, {a.repeats, a.warmups})
                                        : bench_objective(energy, k, batch, {a.repeats, a.warmups}));
    std::cout << objective_name(k) << ": " << format_double(recs.back().wall_ms) << " ms/iter\n";
  }
  auto os = run.csv("bench_objective.csv", bench_header());
  for (const auto& r : recs) write_bench_row(os, r);
  auto ratios = run.csv("bench_ratios.csv", ratio_header());
  for (const auto& r : speed_ratios(recs)) {
    write_ratio_row(ratios, r);
    std::cout << r.numerator << "/" << r.denominator << " = " << format_double(r.ratio) << " (soft threshold "
              << format_double(r.threshold) << ")\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// grad-angle
// ---------------------------------------------------------------------------

struct AngleArgs {
  std::string a = "fd-ssm", b = "ssm";
  std::string grid = "0.1,0.05,0.025,0.0125";
  std::size_t seeds = 20;
  std::size_t batch = 128;
  std::string hidden = "256,256,256";
  std::string dataset = "mog8";
  double sigma = 0.1;
};

template <class S>
int cmd_grad_angle(const Globals& g, const AngleArgs& a) {
  const auto ka = parse_objective(a.a), kb = parse_objective(a.b);
  if (needs_score_model(ka) != needs_score_model(kb))
    throw UsageError("grad-angle: '" + a.a + "' and '" + a.b + "' need different model kinds");
  const auto grid = parse_grid(a.grid, "--eps-grid");
  const auto density = ToyDensity(parse_dataset(a.dataset));
  const auto hidden = parse_widths(a.hidden);
  if (a.seeds == 0) throw UsageError("--seeds must be >= 1");
  Run run(g, "grad-angle",
          {{"objective_a", a.a}, {"objective_b", a.b}, {"eps_grid", a.grid}, {"seeds", std::to_string(a.seeds)},
           {"batch", std::to_string(a.batch)}, {"hidden", a.hidden}, {"dataset", a.dataset},
           {"sigma", format_double(a.sigma)}});
  auto os = run.csv("grad_angle.csv", "objective_a,objective_b,eps,seed,angle_deg");
  auto summary = run.csv("grad_angle_summary.csv", "objective_a,objective_b,eps,median_deg,max_deg");
  const auto base = g.seed_or_zero();
  std::map<double, std::vector<double>> by_eps;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    const auto seed = derive_seed(base, s);
    auto rng = make_stream(seed, kStreamObjective);
    const auto x = density.sample(a.batch, rng).template cast<S>();
    const auto unit = make_batch(x, 1.0, a.sigma, rng);  // eps = 1, rescaled below
    auto angle_at = [&](const auto& model) {
      for (double eps : grid) {
        auto b = unit;
        b.dir = unit.dir.scaled(eps);
        const double deg = grad_angle(ka, kb, model, b);
        by_eps[eps].push_back(deg);
        os << a.a << ',' << a.b << ',' << format_double(eps) << ',' << s << ',' << format_double(deg) << '\n';
      }
    };
    if (needs_score_model(ka)) angle_at(MlpScoreModel<S>::init(2, hidden, derive_seed(seed, kStreamInit)));
    else angle_at(MlpEnergyModel<S>::init(2, hidden, derive_seed(seed, kStreamInit)));
  }
  for (double eps : grid) {
    const auto& v = by_eps[eps];
    const double med = median(v), mx = *std::max_element(v.begin(), v.end());
    summary << a.a << ',' << a.b << ',' << format_double(eps) << ',' << format_double(med) << ',' << format_double(mx)
            << '\n';
    std::cout << "eps " << format_double(eps) << "  median " << format_double(med) << " deg  max "
              << format_double(mx) << " deg\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite-difference score matching lab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string("fdsm ") + FDSM_BUILD_ID);

  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Master RNG seed (default 0)");
  app.add_option("--precision", g.precision, "Scalar type: f32 or f64")->capture_default_str();
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  // stencil
  auto* stencil = app.add_subcommand("stencil", "Print symmetric stencil offsets and weights");
  int st_order = 2;
  std::string st_alphas;
  stencil->add_option("--order", st_order, "Derivative order T")->required();
  stencil->add_option("--alphas", st_alphas, "Comma-separated positive offsets (default 1..K)");

  // approx
  auto* approx = app.add_subcommand("approx", "FD vs exact directional derivative over an epsilon grid");
  std::string ap_fn = "mlp", ap_grid = "0.1,0.05,0.025,0.0125", ap_hidden = "256,256,256";
  int ap_order = 2;
  std::size_t ap_batch = 128;
  approx->add_option("--function", ap_fn, "mlp, quadratic or logsumexp")->capture_default_str();
  approx->add_option("--order", ap_order, "Derivative order T")->capture_default_str();
  approx->add_option("--eps-grid", ap_grid, "Comma-separated epsilons")->capture_default_str();
  approx->add_option("--batch", ap_batch, "Points")->capture_default_str();
  approx->add_option("--hidden", ap_hidden, "MLP hidden widths")->capture_default_str();

  // train: every config key is a flag; flags override the file
  auto* train_cmd = app.add_subcommand("train", "Train a model on a toy density");
  std::string config_path;
  train_cmd->add_option("--config", config_path, "key = value config file");
  std::map<std::string, std::string> train_flags;
  std::vector<std::pair<std::string, CLI::Option*>> train_opts;
  for (const auto& [key, def] : TrainConfig{}.items()) {
    if (key == "seed" || key == "precision") continue;
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    auto* o = train_cmd->add_option("--" + flag, train_flags[key], "default " + def);
    train_opts.emplace_back(key, o);
  }

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Fisher divergence and exact SM loss of a checkpoint");
  std::string ev_ckpt, ev_dataset;
  std::size_t ev_fisher = 2000, ev_batch = 512;
  eval_cmd->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--dataset", ev_dataset, "gauss2, mog8, rings or checker")->required();
  eval_cmd->add_option("--fisher-samples", ev_fisher, "Samples for the Fisher estimate")->capture_default_str();
  eval_cmd->add_option("--eval-batch", ev_batch, "Held-out rows for exact SM")->capture_default_str();

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "Langevin samples from a checkpoint");
  std::string sm_ckpt;
  std::size_t sm_n = 1000;
  AnnealSchedule sched;
  sample_cmd->add_option("--checkpoint", sm_ckpt, "Checkpoint path")->required();
  sample_cmd->add_option("-n", sm_n, "Number of chains")->capture_default_str();
  sample_cmd->add_option("--sigma-first", sched.sigma_first, "Largest noise level")->capture_default_str();
  sample_cmd->add_option("--sigma-last", sched.sigma_last, "Smallest noise level")->capture_default_str();
  sample_cmd->add_option("--levels", sched.levels, "Number of noise levels")->capture_default_str();
  sample_cmd->add_option("--steps-per-level", sched.steps_per_level, "Steps at each level")->capture_default_str();
  sample_cmd->add_option("--base-step", sched.base_step, "Step size at the last level")->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "Timing and counters");
  bench->require_subcommand(1);
  BenchArgs ba;
  auto* sweep = bench->add_subcommand("order-sweep", "Nested exact vs FD cost for T = 1..T-max");
  auto* bobj = bench->add_subcommand("objective", "Per-iteration cost of objectives");
  for (auto* sc : {sweep, bobj}) {
    sc->add_option("--eps", ba.eps, "Epsilon")->capture_default_str();
    sc->add_option("--batch", ba.batch, "Batch rows")->capture_default_str();
    sc->add_option("--hidden", ba.hidden, "MLP hidden widths")->capture_default_str();
    sc->add_option("--repeats", ba.repeats, "Timed repeats (median reported)")->capture_default_str();
    sc->add_option("--warmups", ba.warmups, "Untimed warmups")->capture_default_str();
  }
  sweep->add_option("--t-max", ba.t_max, "Highest order")->capture_default_str();
  bobj->add_option("--objectives", ba.objectives, "Comma-separated objective tokens")->capture_default_str();
  bobj->add_option("--sigma", ba.sigma, "Noise level for DSM-type objectives")->capture_default_str();

  // grad-angle
  auto* angle = app.add_subcommand("grad-angle", "Angle between parameter gradients of two objectives");
  AngleArgs aa;
  angle->add_option("--objective-a", aa.a, "First objective")->required();
  angle->add_option("--objective-b", aa.b, "Second objective")->required();
  angle->add_option("--eps-grid", aa.grid, "Comma-separated epsilons")->capture_default_str();
  angle->add_option("--seeds", aa.seeds, "Random models per epsilon")->capture_default_str();
  angle->add_option("--batch", aa.batch, "Batch rows")->capture_default_str();
  angle->add_option("--hidden", aa.hidden, "MLP hidden widths")->capture_default_str();
  angle->add_option("--dataset", aa.dataset, "Data for the batch")->capture_default_str();
  angle->add_option("--sigma", aa.sigma, "Noise level for DSM-type objectives")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (g.precision != "f32" && g.precision != "f64")
      throw UsageError("unknown precision '" + g.precision + "' (valid: f32, f64)");
    const bool f32 = g.precision == "f32";

    if (*stencil) return cmd_stencil(g, st_order, st_alphas);
    if (*approx)
      return f32 ? cmd_approx<float>(g, ap_fn, ap_order, ap_grid, ap_batch, ap_hidden)
                 : cmd_approx<double>(g, ap_fn, ap_order, ap_grid, ap_batch, ap_hidden);
    if (*train_cmd) {
      TrainConfig cfg;
      cfg.threads = env_threads();
      if (!config_path.empty()) cfg.load_file(config_path);
      for (const auto& [key, opt] : train_opts)
        if (opt->count() > 0) cfg.set(key, train_flags[key]);
      if (g.seed) cfg.seed = *g.seed;
      g.seed = cfg.seed;
      cfg.precision = g.precision;
      cfg.validate();
      return f32 ? cmd_train<float>(g, cfg) : cmd_train<double>(g, cfg);
    }
    if (*eval_cmd)
      return f32 ? cmd_eval<float>(g, ev_ckpt, ev_dataset, ev_fisher, ev_batch)
                 : cmd_eval<double>(g, ev_ckpt, ev_dataset, ev_fisher, ev_batch);
    if (*sample_cmd) return f32 ? cmd_sample<float>(g, sm_ckpt, sm_n, sched) : cmd_sample<double>(g, sm_ckpt, sm_n, sched);
    if (*sweep) return f32 ? cmd_bench_sweep<float>(g, ba) : cmd_bench_sweep<double>(g, ba);
    if (*bobj) return f32 ? cmd_bench_objective<float>(g, ba) : cmd_bench_objective<double>(g, ba);
    if (*angle) return f32 ? cmd_grad_angle<float>(g, aa) : cmd_grad_angle<double>(g, aa);
  } catch (const std::invalid_argument& e) {
    // bad tokens, shapes or config values: a usage problem
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
