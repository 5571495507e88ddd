#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fdsm/optim.hpp"

using namespace fdsm;
using T = Tensor<double>;
using V = Var<double>;

namespace {

std::vector<V> scalar_params(double theta) { return {V::leaf(T::vector({theta}))}; }

}  // namespace

TEST(Optimizer, SgdStepIsThetaMinusLrTimesGrad) {
  auto p = scalar_params(1.5);
  Optimizer<double> opt({OptimizerKind::kSgd, 0.1});
  opt.step(p, {T::vector({2.0})});
  EXPECT_DOUBLE_EQ(p[0].value()[0], 1.5 - 0.1 * 2.0);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Optimizer, SgdZeroGradientLeavesParametersUnchanged) {
  std::vector<V> p{V::leaf(T::matrix(2, 2, {1, -2, 3, 0.25}))};
  const auto before = p[0].value();
  Optimizer<double> opt({OptimizerKind::kSgd, 0.5});
  opt.step(p, {T::zeros({2, 2})});
  EXPECT_EQ(p[0].value(), before);
}

TEST(Optimizer, AdamFirstStepHasMagnitudeLr) {
  for (double g : {3.0, -0.02, 1e4}) {
    auto p = scalar_params(0.0);
    Optimizer<double> opt({OptimizerKind::kAdam, 1e-3});
    opt.step(p, {T::vector({g})});
    // bias-corrected first step: lr * g / (|g| + eps)
    EXPECT_NEAR(p[0].value()[0], -1e-3 * g / (std::abs(g) + 1e-8), 1e-15);
  }
}

TEST(Optimizer, AdamMatchesHandComputedSecondStep) {
  auto p = scalar_params(1.0);
  Optimizer<double> opt({OptimizerKind::kAdam, 0.01, 0.9, 0.999, 1e-8});
  opt.step(p, {T::vector({1.0})});
  opt.step(p, {T::vector({-2.0})});
  const double m = 0.9 * 0.1 + 0.1 * -2.0, v = 0.999 * 0.001 + 0.001 * 4.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double expected = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
  EXPECT_NEAR(p[0].value()[0], expected, 1e-14);
}

TEST(Optimizer, NonFiniteGradientNamesBlockAndLeavesParameters) {
  std::vector<V> p{V::leaf(T::vector({1.0})), V::leaf(T::vector({2.0, 3.0}))};
  Optimizer<double> opt({OptimizerKind::kSgd, 0.1});
  try {
    opt.step(p, {T::vector({0.5}), T::vector({1.0, std::numeric_limits<double>::quiet_NaN()})},
             {"layer0.weight", "layer0.bias"});
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.block(), "layer0.bias");
    EXPECT_NE(std::string(e.what()).find("layer0.bias"), std::string::npos);
  }
  EXPECT_EQ(p[0].value()[0], 1.0);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Optimizer, ShapeMismatchAndBadConfig) {
  auto p = scalar_params(0.0);
  Optimizer<double> opt;
  EXPECT_THROW(opt.step(p, {T::vector({1.0, 2.0})}), ShapeError);
  EXPECT_THROW(opt.step(p, {}), std::invalid_argument);
  EXPECT_THROW(Optimizer<double>({OptimizerKind::kSgd, 0.0}), std::invalid_argument);
  EXPECT_THROW(parse_optimizer("rmsprop"), std::invalid_argument);
}
