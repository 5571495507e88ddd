#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fdsm/trainer.hpp"

using namespace fdsm;

namespace {

TrainConfig small_config(const std::string& objective) {
  TrainConfig c;
  c.objective = objective;
  c.dataset = "gauss2";
  c.batch = 32;
  c.iterations = 20;
  c.eval_every = 10;
  c.hidden = "16,16";
  c.eval_batch = 64;
  c.fisher_samples = 128;
  c.seed = 7;
  return c;
}

/// Log rows without the timing column.
std::string body(const std::vector<LogRow>& rows, const std::string& tok) {
  std::ostringstream os;
  for (auto r : rows) {
    r.wall_ms_per_iter = 0;
    write_log_row(os, tok, r);
  }
  return os.str();
}

std::vector<double> snapshot(const std::vector<Var<double>>& params) {
  std::vector<Tensor<double>> t;
  for (const auto& p : params) t.push_back(p.value());
  return flatten(t);
}

}  // namespace

TEST(TrainConfig, SetLoadAndValidate) {
  TrainConfig c;
  std::istringstream in("# comment\nobjective = ssm\nbatch=64\n eps-decay = linear:0.01 # trailing\n\nlr = 5e-4\n");
  c.load(in);
  EXPECT_EQ(c.objective, "ssm");
  EXPECT_EQ(c.batch, 64u);
  EXPECT_EQ(c.eps_decay, "linear:0.01");
  EXPECT_DOUBLE_EQ(c.lr, 5e-4);
  c.validate();
  c.set("batch", "128");  // later values override
  EXPECT_EQ(c.batch, 128u);
  EXPECT_THROW(c.set("nope", "1"), ConfigError);
  EXPECT_THROW(c.set("batch", "-3"), ConfigError);
  EXPECT_THROW(c.set("lr", "fast"), ConfigError);
  std::istringstream bad("objective ssm\n");
  EXPECT_THROW(c.load(bad), ConfigError);
}

TEST(TrainConfig, InvariantsRejected) {
  auto expect_invalid = [](const std::string& key, const std::string& val) {
    TrainConfig c;
    c.set(key, val);
    EXPECT_THROW(c.validate(), std::invalid_argument) << key << "=" << val;
  };
  expect_invalid("batch", "0");
  expect_invalid("lr", "0");
  expect_invalid("eps", "0");
  expect_invalid("objective", "nce");
  expect_invalid("dataset", "moons");
  expect_invalid("eps_decay", "cosine");
  expect_invalid("eps_decay", "linear:0.5");
  expect_invalid("precision", "f16");
}

TEST(TrainConfig, ItemsRoundTrip) {
  TrainConfig a = small_config("fd-dsm");
  a.set("eps_decay", "linear:0.02");
  std::ostringstream os;
  for (const auto& [k, v] : a.items()) os << k << " = " << v << "\n";
  TrainConfig b;
  std::istringstream in(os.str());
  b.load(in);
  EXPECT_EQ(a.items(), b.items());
}

TEST(EpsilonSchedule, ConstantAndLinear) {
  const auto c = EpsilonSchedule::parse(0.1, "none");
  EXPECT_EQ(c.at(0, 10), 0.1);
  EXPECT_EQ(c.at(9, 10), 0.1);
  const auto l = EpsilonSchedule::parse(0.1, "linear:0.01");
  EXPECT_DOUBLE_EQ(l.at(0, 10), 0.1);
  EXPECT_DOUBLE_EQ(l.at(9, 10), 0.01);
  EXPECT_DOUBLE_EQ(l.at(3, 7), 0.055);
}

TEST(Trainer, ZeroIterationsLogsInitialRowAndKeepsInit) {
  auto c = small_config("fd-ssm");
  c.iterations = 0;
  const auto res = train<double>(c);
  ASSERT_EQ(res.rows.size(), 1u);
  EXPECT_EQ(res.rows[0].iter, 0u);
  EXPECT_FALSE(res.aborted);
  const auto& m = std::get<MlpEnergyModel<double>>(res.model);
  const auto init = MlpEnergyModel<double>::init(2, {16, 16}, derive_seed(c.seed, kStreamInit));
  EXPECT_EQ(snapshot(m.parameters()), snapshot(init.parameters()));
}

TEST(Trainer, SameSeedGivesIdenticalLogs) {
  for (const char* obj : {"fd-ssm", "dsm", "fd-ssmvr"}) {
    const auto c = small_config(obj);
    const auto a = train<double>(c), b = train<double>(c);
    ASSERT_EQ(a.rows.size(), 3u);
    EXPECT_EQ(body(a.rows, obj), body(b.rows, obj)) << obj;
  }
}

TEST(Trainer, DifferentSeedsDiffer) {
  auto c = small_config("fd-ssm");
  const auto a = train<double>(c);
  c.seed = 8;
  const auto b = train<double>(c);
  EXPECT_NE(body(a.rows, "x"), body(b.rows, "x"));
}

TEST(Trainer, ScoreObjectivesGetScoreModel) {
  const auto res = train<double>(small_config("ssmvr"));
  EXPECT_TRUE(std::holds_alternative<MlpScoreModel<double>>(res.model));
  EXPECT_TRUE(std::isfinite(res.rows.back().fisher));
}

TEST(Trainer, LogCountersForFdSsm) {
  const auto res = train<double>(small_config("fd-ssm"));
  const auto& r = res.rows.back();
  EXPECT_EQ(r.counters.forward_rows, 3u * 32u);
  EXPECT_EQ(r.counters.nested_passes, 0u);
  EXPECT_EQ(r.counters.derivative_passes(), 1u);  // the parameter gradient
  EXPECT_EQ(r.counters.max_tape_depth, 1);
  EXPECT_EQ(res.rows[0].counters.forward_rows, 0u);  // nothing trained yet
}

TEST(Trainer, CsvRowHasHeaderArity) {
  const auto res = train<double>(small_config("ssm"));
  std::ostringstream os;
  write_log_row(os, "ssm", res.rows.back());
  const std::string header = log_header();
  const auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(commas(os.str()), commas(header));
  EXPECT_EQ(header.rfind("iter,objective,loss,sm_exact,fisher", 0), 0u);
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnosticRow) {
  auto c = small_config("fd-ssm");
  c.eps = 1e-300;  // eps^2 underflows to zero; the FD quotient is 0/0
  const auto res = train<double>(c);
  ASSERT_TRUE(res.aborted);
  const auto& r = res.rows.back();
  EXPECT_EQ(r.status, "nonfinite-loss");
  EXPECT_EQ(r.iter, 1u);
  EXPECT_EQ(r.epsilon, 1e-300);
  EXPECT_NE(res.diagnostic.find("iteration 1"), std::string::npos);
}

TEST(Trainer, ShardedGradientMatchesSingleThread) {
  const auto model = MlpEnergyModel<double>::init(2, {16, 16}, 3);
  std::mt19937_64 rng(4);
  const auto x = ToyDensity(DatasetKind::kMog8).sample(37, rng);
  const auto batch = make_batch(x, 0.1, 0.1, rng);
  for (auto kind : {ObjectiveKind::kFdSsm, ObjectiveKind::kSsm, ObjectiveKind::kDsm}) {
    const auto one = objective_gradient(kind, model, batch, 1);
    const auto four = objective_gradient(kind, model, batch, 4);
    const auto again = objective_gradient(kind, model, batch, 4);
    EXPECT_NEAR(one.loss, four.loss, 1e-12 * std::max(1.0, std::abs(one.loss)));
    const auto a = flatten(one.grads), b = flatten(four.grads);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    EXPECT_EQ(flatten(four.grads), flatten(again.grads));
    EXPECT_EQ(one.counters.forward_rows, four.counters.forward_rows);
  }
}

TEST(Trainer, ThreadedRunIsReproducible) {
  auto c = small_config("fd-ssm");
  c.threads = 3;
  EXPECT_EQ(body(train<double>(c).rows, "t"), body(train<double>(c).rows, "t"));
}

// FD-SSM and SSM updates stay aligned along matched-seed trajectories.
TEST(Trainer, FdSsmUpdatesFollowSsm) {
  TrainConfig c;
  c.dataset = "mog8";
  c.hidden = "64,64";
  c.batch = 64;
  c.iterations = 100;
  c.eps = 0.05;
  c.eval_batch = 8;
  c.fisher_samples = 8;
  c.seed = 11;
  auto cs = c, cf = c;
  cs.objective = "ssm";
  cf.objective = "fd-ssm";
  const auto init = MlpEnergyModel<double>::init(2, {64, 64}, 5);
  Trainer ts(cs, init.clone()), tf(cf, init.clone());
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const auto s0 = snapshot(ts.model().parameters()), f0 = snapshot(tf.model().parameters());
    ts.step();
    tf.step();
    const auto s1 = snapshot(ts.model().parameters()), f1 = snapshot(tf.model().parameters());
    std::vector<double> ds(s0.size()), df(f0.size());
    for (std::size_t j = 0; j < s0.size(); ++j) {
      ds[j] = s1[j] - s0[j];
      df[j] = f1[j] - f0[j];
    }
    worst = std::max(worst, angle_degrees(ds, df));
  }
  EXPECT_LT(worst, 15.0);
}

TEST(Trainer, FdSsmLearnsGaussianScore) {
  TrainConfig c;
  c.objective = "fd-ssm";
  c.dataset = "gauss2";
  c.iterations = 2000;
  c.eps = 0.1;
  c.eval_every = 2000;
  c.seed = 1;
  const auto res = train<double>(c);
  ASSERT_FALSE(res.aborted) << res.diagnostic;
  EXPECT_LT(res.rows.back().fisher, 0.05);
}
