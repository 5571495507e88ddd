#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <thread>

#include "fdsm/autodiff.hpp"
#include "fdsm/directional.hpp"
#include "test_support.hpp"

using namespace fdsm;
using fdsm::testing::max_rel_error;
using fdsm::testing::numeric_gradient;
using fdsm::testing::random_tensor;
using V = Var<double>;
using T = Tensor<double>;

TEST(TensorOps, AddSoftplusMatmul) {
  auto a = V::constant(T::vector({1, 2}));
  auto b = V::constant(T::vector({3, 4}));
  EXPECT_EQ(add(a, b).value(), T::vector({4, 6}));

  EXPECT_NEAR(softplus(V::constant(T::scalar(0.0))).value().item(), 0.693147180559945, 1e-14);

  auto eye = V::constant(T::matrix(2, 2, {1, 0, 0, 1}));
  auto m = V::constant(T::matrix(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(matmul(eye, m).value(), T::matrix(2, 2, {5, 6, 7, 8}));
}

TEST(TensorOps, SoftplusIsStableForLargeInputs) {
  auto x = V::constant(T::vector({-800.0, 800.0}));
  auto y = softplus(x).value();
  EXPECT_NEAR(y[0], 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(y[1], 800.0);
}

TEST(TensorOps, ShapeMismatchNamesOpAndShapes) {
  auto a = V::constant(T({2, 3}));
  auto b = V::constant(T({4}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "add");
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4]"), std::string::npos);
  }
  EXPECT_THROW(matmul(V::constant(T({2, 3})), V::constant(T({2, 3}))), ShapeError);
}

TEST(TensorOps, RowBroadcastOverLeadingBatchDimension) {
  auto a = V::constant(T::matrix(2, 2, {1, 2, 3, 4}));
  auto b = V::constant(T::vector({10, 20}));
  EXPECT_EQ(add(a, b).value(), T::matrix(2, 2, {11, 22, 13, 24}));
  EXPECT_EQ(mul(b, a).value(), T::matrix(2, 2, {10, 40, 30, 80}));
}

TEST(Gradient, SquareSum) {
  auto x = V::leaf(T::vector({1, 2, 3}));
  auto g = gradient(sum(square(x)), x);
  EXPECT_EQ(g.value(), T::vector({2, 4, 6}));
}

TEST(Gradient, SecondDerivativeOfCube) {
  auto x = V::leaf(T::scalar(2.0));
  auto g1 = gradient(x * x * x, x, true);
  auto g2 = gradient(g1, x);
  EXPECT_DOUBLE_EQ(g2.value().item(), 12.0);
}

TEST(Gradient, ThirdDerivativeOfQuartic) {
  auto x = V::leaf(T::scalar(1.0));
  auto y = square(square(x));
  auto g1 = gradient(y, x, true);
  auto g2 = gradient(g1, x, true);
  auto g3 = gradient(g2, x);
  EXPECT_DOUBLE_EQ(g3.value().item(), 24.0);
}

TEST(Gradient, NonScalarOutputIsAnError) {
  auto x = V::leaf(T::vector({1, 2}));
  EXPECT_THROW(gradient(square(x), x), std::invalid_argument);
}

TEST(Gradient, UnreachableNodeGetsZeros) {
  auto x = V::leaf(T::vector({1, 2}));
  auto z = V::leaf(T::matrix(2, 2, {1, 2, 3, 4}));
  auto g = gradient(sum(square(x)), std::vector<V>{x, z});
  EXPECT_EQ(g[1].value(), T::zeros({2, 2}));
  // Constant output: everything is zero.
  auto gc = gradient(sum(V::constant(T::vector({1, 2}))), x);
  EXPECT_EQ(gc.value(), T::zeros({2}));
}

TEST(Gradient, NestedResultsAreDifferentiableOnlyWhenRequested) {
  auto x = V::leaf(T::scalar(2.0));
  EXPECT_FALSE(gradient(x * x, x).requires_grad());
  EXPECT_TRUE(gradient(x * x, x, true).requires_grad());
}

namespace {

// A random smooth composition exercising every differentiable op.
struct RandomProgram {
  T w1, b1, w2, u;
  explicit RandomProgram(std::mt19937_64& rng)
      : w1(random_tensor({3, 5}, rng, 0.7)),
        b1(random_tensor({5}, rng, 0.3)),
        w2(random_tensor({5, 2}, rng, 0.7)),
        u(random_tensor({4, 2}, rng, 0.5)) {}

  V operator()(const V& x) const {
    const auto h = softplus(add(matmul(x, V::constant(w1)), V::constant(b1)));  // [4,5]
    const auto o = matmul(h, V::constant(w2));                                   // [4,2]
    const auto s = sigmoid(o) * V::constant(u);
    const auto r = row_sum(exp(scale(o, 0.2)));                                  // [4]
    const auto l = log(add_scalar(square(r), 1.0));
    const auto c = concat_rows<double>({x, scale(x, 0.5)});  // [8,3]
    const auto sl = slice_rows(c, 2, 4);
    const auto q = div(sum_rows(square(sl)), add_scalar(softplus(sum_rows(x)), 1.0));
    return add(add(sum(s), sum(l)), sub(sum(q), mean(tile_rows(reshape(sum(x), {1}), 3))));
  }
};

}  // namespace

TEST(GradientProperty, MatchesCentralDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    RandomProgram f(rng);
    const T x0 = random_tensor({4, 3}, rng);
    const auto x = V::leaf(x0);
    const auto g = gradient(f(x), x).value();
    const auto num = numeric_gradient([&](const T& xv) { return f(V::constant(xv)).value().item(); }, x0, 1e-6);
    EXPECT_LT(max_rel_error(g, num), 1e-5) << "trial " << trial;
  }
}

TEST(GradientProperty, Linearity) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> coef(-3.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    RandomProgram f(rng), h(rng);
    const double a = coef(rng), b = coef(rng);
    const T x0 = random_tensor({4, 3}, rng);
    const auto x = V::leaf(x0);
    const auto combined = gradient(add(scale(f(x), a), scale(h(x), b)), x).value();
    const auto gf = gradient(f(x), x).value();
    const auto gh = gradient(h(x), x).value();
    for (std::size_t i = 0; i < combined.size(); ++i)
      EXPECT_NEAR(combined[i], a * gf[i] + b * gh[i], 1e-12 * std::max(1.0, std::abs(combined[i])));
  }
}

TEST(GradientProperty, BackwardIsDeterministic) {
  std::mt19937_64 rng(3);
  RandomProgram f(rng);
  const T x0 = random_tensor({4, 3}, rng);
  const auto run = [&] {
    const auto x = V::leaf(x0);
    const auto g = gradient(f(x), x, true);
    return gradient(sum(square(g)), x).value();
  };
  const auto first = run();
  for (int i = 0; i < 3; ++i) EXPECT_EQ(run(), first);
}

TEST(GradientProperty, SecondOrderMatchesDifferencesOfGradient) {
  std::mt19937_64 rng(5);
  RandomProgram f(rng);
  const T x0 = random_tensor({4, 3}, rng);
  const T w = random_tensor({4, 3}, rng);
  // d/dx <grad f, w> by reverse-over-reverse vs central differences of <grad f, w>.
  const auto x = V::leaf(x0);
  const auto hvp = gradient(dot(gradient(f(x), x, true), V::constant(w)), x).value();
  const auto num = numeric_gradient(
      [&](const T& xv) {
        const auto xl = V::leaf(xv);
        return kernels::sum(kernels::zip("mul", gradient(f(xl), xl).value(), w, [](double p, double q) { return p * q; }));
      },
      x0, 1e-5);
  EXPECT_LT(max_rel_error(hvp, num), 1e-6);
}

TEST(Tape, DistinctThreadsHaveIndependentTapes) {
  std::mt19937_64 rng(9);
  RandomProgram f(rng);
  const T x0 = random_tensor({4, 3}, rng);
  const auto x_main = V::leaf(x0);
  const auto g_main = gradient(f(x_main), x_main).value();
  T g_thread;
  std::thread worker([&] {
    const auto xt = V::leaf(x0);
    g_thread = gradient(f(xt), xt).value();
  });
  {
    NoGradGuard guard;  // the worker's tape keeps recording
    worker.join();
  }
  EXPECT_EQ(g_thread, g_main);
  EXPECT_TRUE(Tape::recording());
}

// ---------------------------------------------------------------------------
// Exact directional derivatives
// ---------------------------------------------------------------------------

namespace {
V squared_norm_rows(const V& x) { return row_sum(square(x)); }
}  // namespace

TEST(ExactDirectional, FirstOrderOfSquaredNorm) {
  const auto d = exact_directional_derivative<double>(squared_norm_rows, T::matrix(1, 1, {3.0}), T::matrix(1, 1, {0.1}), 1);
  EXPECT_NEAR(d[0], 0.6, 1e-15);
}

TEST(ExactDirectional, SecondOrderOfSquaredNormIsTwiceEpsSquared) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    const T x = random_tensor({1, 3}, rng);
    T v = random_tensor({1, 3}, rng);
    const double n = std::sqrt(kernels::sum(kernels::map(v, [](double a) { return a * a; })));
    for (auto& e : v.values()) e *= 0.1 / n;
    const auto d = exact_directional_derivative<double>(squared_norm_rows, x, v, 2);
    EXPECT_NEAR(d[0], 0.02, 1e-15);
  }
}

TEST(ExactDirectional, FourthOrderOfExp) {
  // (h d/dx)^4 e^x at 0 = h^4
  const double h = 0.3;
  const auto d = exact_directional_derivative<double>([](const V& x) { return row_sum(exp(x)); }, T::matrix(1, 1, {0.0}),
                                                      T::matrix(1, 1, {h}), 4);
  EXPECT_NEAR(d[0], std::pow(h, 4), 1e-15);
}

TEST(ExactDirectional, OrderBelowOneIsAnError) {
  EXPECT_THROW(exact_directional_derivative<double>(squared_norm_rows, T::matrix(1, 1, {1.0}), T::matrix(1, 1, {1.0}), 0),
               std::invalid_argument);
}

TEST(ExactDirectional, QuadraticPolynomialsAreExact) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const T a = random_tensor({3, 3}, rng);
    const T b = random_tensor({3}, rng);
    const T x = random_tensor({2, 3}, rng);
    const T v = random_tensor({2, 3}, rng, 0.1);
    // q(x) = x^T A x + b^T x; (v.grad) q = v^T (A + A^T) x + b^T v; (v.grad)^2 q = v^T (A + A^T) v
    const auto q = [&](const V& xv) {
      return add(row_sum(mul(matmul(xv, V::constant(a)), xv)), row_sum(mul(xv, V::constant(b))));
    };
    const auto d1 = exact_directional_derivative<double>(q, x, v, 1);
    const auto d2 = exact_directional_derivative<double>(q, x, v, 2);
    for (std::size_t r = 0; r < 2; ++r) {
      double e1 = 0, e2 = 0;
      for (std::size_t i = 0; i < 3; ++i) {
        e1 += b[i] * v(r, i);
        for (std::size_t j = 0; j < 3; ++j) {
          const double s = a(i, j) + a(j, i);
          e1 += v(r, i) * s * x(r, j);
          e2 += v(r, i) * s * v(r, j);
        }
      }
      EXPECT_NEAR(d1[r], e1, 1e-12);
      EXPECT_NEAR(d2[r], e2, 1e-12);
    }
  }
}

TEST(ExactDirectional, CountersRecordDepthAndPasses) {
  for (int order = 1; order <= 4; ++order) {
    CounterScope scope;
    exact_directional_derivative<double>([](const V& x) { return row_sum(exp(x)); }, T::matrix(1, 2, {0.1, 0.2}),
                                         T::matrix(1, 2, {0.1, 0.1}), order);
    const auto c = scope.delta();
    EXPECT_EQ(c.derivative_passes(), static_cast<std::uint64_t>(order));
    EXPECT_EQ(c.max_tape_depth, order);
  }
}
