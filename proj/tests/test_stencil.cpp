#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "fdsm/directional.hpp"
#include "fdsm/models.hpp"
#include "fdsm/stats.hpp"
#include "fdsm/stencil.hpp"
#include "test_functions.hpp"
#include "test_support.hpp"

using namespace fdsm;
using fdsm::testing::random_tensor;
using fdsm::testing::RandomPolynomial;
using T = Tensor<double>;
using V = Var<double>;

namespace {

T direction(std::size_t rows, std::size_t d, double eps, std::mt19937_64& rng) {
  T v = random_tensor({rows, d}, rng);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0;
    for (std::size_t c = 0; c < d; ++c) n += v(r, c) * v(r, c);
    n = std::sqrt(n);
    for (std::size_t c = 0; c < d; ++c) v(r, c) *= eps / n;
  }
  return v;
}

/// max_r |a_r - b_r| / max_r |b_r|
double batch_rel_error(const T& a, const T& b) {
  double err = 0, scale = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    err = std::max(err, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return err / scale;
}

T scaled(const T& v, double s) {
  T out = v;
  for (auto& e : out.values()) e *= s;
  return out;
}

}  // namespace

TEST(SolveSymmetric, PublishedSmallCases) {
  auto s2 = solve_symmetric(2, {1});
  ASSERT_EQ(s2.betas.size(), 1u);
  EXPECT_EQ(s2.betas[0], 1.0);
  EXPECT_TRUE(s2.includes_center);
  EXPECT_EQ(s2.half_width, 1);

  auto s1 = solve_symmetric(1, {1});
  EXPECT_EQ(s1.betas[0], 1.0);
  EXPECT_FALSE(s1.includes_center);
}

TEST(SolveSymmetric, OrderFourRationalSolve) {
  auto s = solve_symmetric(4, {1, 2});
  ASSERT_EQ(s.betas.size(), 2u);
  EXPECT_DOUBLE_EQ(s.betas[0], -1.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.betas[1], 1.0 / 3.0);
  EXPECT_TRUE(s.exact_solve);
  EXPECT_TRUE(s.exact_residual_zero);
}

TEST(SolveSymmetric, DefaultAlphasAreOneToK) {
  auto s = solve_symmetric(5);
  EXPECT_EQ(s.alphas, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(s.evaluations(), 6u);
  EXPECT_EQ(solve_symmetric(6).evaluations(), 7u);
}

TEST(SolveSymmetric, RejectsBadOffsets) {
  EXPECT_THROW(solve_symmetric(4, {1, 1}), std::invalid_argument);
  EXPECT_THROW(solve_symmetric(2, {-1}), std::invalid_argument);
  EXPECT_THROW(solve_symmetric(2, {0}), std::invalid_argument);
  EXPECT_THROW(solve_symmetric(4, {1}), std::invalid_argument);
  EXPECT_THROW(solve_symmetric(0, {}), std::invalid_argument);
}

TEST(SolveSymmetric, ResidualWithinTolerance) {
  for (int t = 1; t <= 16; ++t) {
    auto s = solve_symmetric(t);
    EXPECT_LE(coefficient_residual(s), 1e-12) << "T=" << t;
    if (s.exact_solve) EXPECT_TRUE(s.exact_residual_zero);
  }
  auto irregular = solve_symmetric(6, {0.5, 1.25, 3.0});
  EXPECT_LE(coefficient_residual(irregular), 1e-12);
}

TEST(SolveSymmetric, FloatPathForLargeSystemsWarnsWhenIllConditioned) {
  auto s = solve_symmetric(18);  // K = 9 > exact-solve limit
  EXPECT_FALSE(s.exact_solve);
  EXPECT_GT(s.condition_estimate, kConditionWarnThreshold);
  EXPECT_FALSE(s.warnings.empty());

  std::vector<double> spread{0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.1, 2.4, 2.7};
  auto mild = solve_symmetric(17, spread);
  EXPECT_FALSE(mild.exact_solve);
  EXPECT_LT(coefficient_residual(mild), 1e-6);
}

TEST(SolveGeneral, SmallCases) {
  auto c = solve_general(1, {-1, 1});
  EXPECT_DOUBLE_EQ(c.betas[0], -0.5);
  EXPECT_DOUBLE_EQ(c.betas[1], 0.5);

  auto s = solve_general(2, {-1, 0, 1});
  EXPECT_DOUBLE_EQ(s.betas[0], 0.5);
  EXPECT_DOUBLE_EQ(s.betas[1], -1.0);
  EXPECT_DOUBLE_EQ(s.betas[2], 0.5);

  auto f = solve_general(1, {0, 1});
  EXPECT_DOUBLE_EQ(f.betas[0], -1.0);
  EXPECT_DOUBLE_EQ(f.betas[1], 1.0);
  EXPECT_EQ(coefficient_residual(f), 0.0);
}

TEST(SolveGeneral, RejectsDuplicatesAndWrongCount) {
  EXPECT_THROW(solve_general(1, {1, 1}), std::invalid_argument);
  EXPECT_THROW(solve_general(2, {0, 1}), std::invalid_argument);
}

TEST(SolveGeneral, ResidualWithinTolerance) {
  for (int t = 1; t <= 7; ++t) {
    std::vector<double> g;
    for (int i = 0; i <= t; ++i) g.push_back(i - t / 2.0 + 0.25);
    EXPECT_LE(coefficient_residual(solve_general(t, g)), 1e-12) << "T=" << t;
  }
}

TEST(FdDirectional, ConstantFunctionGivesZero) {
  auto f = [](const T& x) { return T({x.dim(0)}, 3.5); };
  T x({2, 3}, 0.7);
  std::mt19937_64 rng(1);
  const T v = direction(2, 3, 0.1, rng);
  for (int t = 1; t <= 4; ++t) {
    auto est = fd_directional(f, x, v, solve_symmetric(t));
    for (double e : est.values.values()) EXPECT_EQ(e, 0.0);
  }
}

TEST(FdDirectional, SquaredNormSecondOrderIsTwoEpsSquared) {
  auto f = [](const T& x) { return kernels::row_sum(kernels::map(x, [](double a) { return a * a; })); };
  // dyadic inputs keep every intermediate exact, so equality is exact too
  T x = T::matrix(1, 3, {0.5, -1.25, 2.0});
  T v = T::matrix(1, 3, {0.375, 0.0, 0.5});  // norm 0.625
  auto est = fd_directional(f, x, v, solve_symmetric(2, {1}));
  EXPECT_EQ(est.value(), 2 * 0.625 * 0.625);

  T small = T::matrix(1, 3, {0.06, 0.0, 0.08});  // norm 0.1
  EXPECT_NEAR(fd_directional(f, x, small, solve_symmetric(2, {1})).value(), 0.02, 1e-14);
}

TEST(FdDirectional, CubicThirdOrderExact) {
  std::mt19937_64 rng(5);
  auto poly = RandomPolynomial::make(3, 3, rng);
  const T x = random_tensor({4, 3}, rng);
  const T v = direction(4, 3, 0.1, rng);
  auto est = fd_directional(poly, x, v, solve_symmetric(3, {1, 2}));
  for (std::size_t r = 0; r < 4; ++r) {
    const double truth = poly.directional(x.data() + 3 * r, v.data() + 3 * r, 3);
    EXPECT_NEAR(est.values[r], truth, 1e-10 * std::max(1.0, std::abs(truth)));
  }
}

TEST(FdDirectional, PolynomialExactnessAgreesWithNestedAutodiff) {
  std::mt19937_64 rng(11);
  for (int t = 1; t <= 5; ++t) {
    for (int trial = 0; trial < 5; ++trial) {
      auto poly = RandomPolynomial::make(3, t, rng);
      const T x = random_tensor({6, 3}, rng);
      const T v = direction(6, 3, 0.1, rng);
      const auto fd = fd_directional(poly, x, v, solve_symmetric(t));
      const T exact = exact_directional_derivative<double>([&](const V& z) { return poly(z); }, x, v, t);
      T truth({6});
      for (std::size_t r = 0; r < 6; ++r) truth[r] = poly.directional(x.data() + 3 * r, v.data() + 3 * r, t);
      // relative to the batch scale: single rows can be near zero when w.v is
      EXPECT_LE(batch_rel_error(exact, truth), 1e-10) << "T=" << t;
      EXPECT_LE(batch_rel_error(fd.values, exact), 1e-8) << "T=" << t;
    }
  }
}

TEST(FdDirectional, SmoothFunctionErrorIsSecondOrder) {
  const auto lse = LogSumExpEnergy<double>::random(3, 5, 21);
  auto f = energy_evaluator(lse);
  std::mt19937_64 rng(3);
  const T x = random_tensor({1, 3}, rng);
  const T u = direction(1, 3, 1.0, rng);
  for (int t = 1; t <= 4; ++t) {
    std::vector<double> eps{0.1, 0.05, 0.025, 0.0125}, err;
    for (double e : eps) {
      const T v = scaled(u, e);
      const double exact = exact_directional_derivative<double>([&](const V& z) { return lse.energy(z); }, x, v, t)[0];
      const double fd = fd_directional(f, x, v, solve_symmetric(t)).value();
      err.push_back(std::abs(fd - exact) / std::abs(exact));
    }
    const double slope = loglog_slope(eps, err);
    EXPECT_GE(slope, 1.8) << "T=" << t;
    EXPECT_LE(slope, 2.2) << "T=" << t;
  }
}

TEST(FdDirectional, GeneralStencilErrorIsFirstOrder) {
  const auto lse = LogSumExpEnergy<double>::random(2, 4, 8);
  auto f = energy_evaluator(lse);
  std::mt19937_64 rng(4);
  const T x = random_tensor({1, 2}, rng);
  const T u = direction(1, 2, 1.0, rng);
  const auto st = solve_general(2, {0, 1, 2});
  std::vector<double> eps{0.02, 0.01, 0.005, 0.0025}, err;
  for (double e : eps) {
    const T v = scaled(u, e);
    const double exact = exact_directional_derivative<double>([&](const V& z) { return lse.energy(z); }, x, v, 2)[0];
    err.push_back(std::abs(fd_directional(f, x, v, st).value() - exact) / std::abs(exact));
  }
  EXPECT_NEAR(loglog_slope(eps, err), 1.0, 0.15);
}

TEST(FdDirectional, CountsEvaluationsAndNoDerivativePasses) {
  const auto model = MlpEnergyModel<double>::init(2, {16, 16}, 7);
  auto f = energy_evaluator(model);
  std::mt19937_64 rng(9);
  const T x = random_tensor({5, 2}, rng);
  const T v = direction(5, 2, 0.1, rng);
  for (int t = 1; t <= 6; ++t) {
    const auto st = solve_symmetric(t);
    CounterScope scope;
    auto est = fd_directional(f, x, v, st);
    const auto d = scope.delta();
    const std::size_t expected = 2 * static_cast<std::size_t>((t + 1) / 2) + (t % 2 == 0 ? 1 : 0);
    EXPECT_EQ(est.evaluations_per_point, expected);
    EXPECT_EQ(est.evaluator_calls, 1u);
    EXPECT_EQ(d.forward_calls, 1u);
    EXPECT_EQ(d.forward_rows, 5 * expected);
    EXPECT_EQ(d.derivative_passes(), 0u);
  }
}

TEST(FdDirectional, ParallelModeMatchesConcatenated) {
  const auto model = MlpEnergyModel<double>::init(2, {8}, 2);
  auto f = energy_evaluator(model);
  std::mt19937_64 rng(10);
  const T x = random_tensor({4, 2}, rng);
  const T v = direction(4, 2, 0.1, rng);
  const auto st = solve_symmetric(4);
  const auto a = fd_directional(f, x, v, st, FdMode::kConcatenated);
  const auto b = fd_directional(f, x, v, st, FdMode::kParallel);
  EXPECT_EQ(b.evaluator_calls, 5u);
  // The two paths push different row counts through the matmul, so energies may differ by a
  // few ulp; bound the estimate difference by that rounding times the total stencil weight.
  double fmax = std::abs(f(x)[0]);
  for (double alpha : st.alphas)
    for (double sgn : {1.0, -1.0}) {
      T shifted = x;
      for (std::size_t i = 0; i < x.size(); ++i) shifted[i] += sgn * alpha * v[i];
      const T fs = f(shifted);
      for (double e : fs.values()) fmax = std::max(fmax, std::abs(e));
    }
  double weight = 0;
  for (double beta : st.betas) weight += 4 * std::abs(beta);
  const double tol = 16 * std::numeric_limits<double>::epsilon() * weight * fmax;
  for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(a.values[r], b.values[r], tol);
}

TEST(FdDirectional, PrecisionGuardWarnsOnTinyEpsilon) {
  auto f = [](const T& x) { return kernels::row_sum(x); };
  const T x = T::matrix(1, 2, {1.0, 2.0});
  EXPECT_TRUE(fd_directional(f, x, T::matrix(1, 2, {1e-15, 0.0}), solve_symmetric(2)).warnings.size() > 0);
  EXPECT_TRUE(fd_directional(f, x, T::matrix(1, 2, {0.1, 0.0}), solve_symmetric(2)).warnings.empty());
}

TEST(FdDirectional, RawDerivativeDividesByEpsilonPower) {
  auto f = [](const T& x) { return kernels::row_sum(kernels::map(x, [](double a) { return a * a; })); };
  const T x = T::matrix(1, 2, {1.0, 2.0});
  auto est = fd_directional(f, x, T::matrix(1, 2, {0.0, 0.1}), solve_symmetric(2));
  EXPECT_NEAR(est.raw(0, 2), 2.0, 1e-12);
}

TEST(FdDirectional, ShapeMismatchThrows) {
  auto f = [](const T& x) { return kernels::row_sum(x); };
  EXPECT_THROW(fd_directional(f, T({2, 3}), T({2, 2}), solve_symmetric(1)), ShapeError);
}
