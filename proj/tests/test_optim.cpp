#include <gtest/gtest.h>

#include <cmath>

#include "lsnn/optim.hpp"

using namespace lsnn;

TEST(Adam, ZeroGradientLeavesParametersAndMoments) {
  Adam opt;
  Eigen::VectorXd w = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  const Eigen::VectorXd w0 = w;
  const Eigen::VectorXd g = Eigen::VectorXd::Zero(5);
  adam_step(opt, {{"w", flat(w), flat(g), {}}}, 0.01);
  EXPECT_EQ(w, w0);
  EXPECT_EQ(opt.slots().at("w").m.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(opt.slots().at("w").v.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  Adam opt;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(2);
  Eigen::VectorXd g(2);
  g << 0.5, -3.0;
  const double lr = 0.01;
  Eigen::VectorXd before = w;
  for (int k = 0; k < 10000; ++k) {
    before = w;
    adam_step(opt, {{"w", flat(w), flat(g), {}}}, lr);
  }
  const Eigen::VectorXd step = w - before;
  EXPECT_NEAR(step[0], -lr, 1e-8);
  EXPECT_NEAR(step[1], lr, 1e-8);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  Adam opt;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(1);
  Eigen::VectorXd g = Eigen::VectorXd::Constant(1, 2.0);
  adam_step(opt, {{"w", flat(w), flat(g), {}}}, 0.1);
  EXPECT_NEAR(w[0], -0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
}

TEST(Adam, AmsgradDenominatorNeverDecreases) {
  AdamConfig cfg;
  cfg.amsgrad = true;
  cfg.beta1 = 0.7;
  cfg.beta2 = 0.9;
  Adam opt(cfg);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(1), g(1);
  double prev = 0.0;
  for (int k = 0; k < 200; ++k) {
    g[0] = k == 5 ? 100.0 : 0.1;
    adam_step(opt, {{"w", flat(w), flat(g), {}}}, 0.1);
    const double vmax = opt.slots().at("w").vmax[0];
    EXPECT_GE(vmax, prev);
    EXPECT_GE(vmax, opt.slots().at("w").v[0]);
    prev = vmax;
  }
  EXPECT_GT(prev, 100.0);
}

TEST(Adam, MaskedCoordinatesNeverMove) {
  Adam opt;
  Eigen::VectorXd w = Eigen::VectorXd::Ones(4), g = Eigen::VectorXd::Constant(4, 1.0), mask(4);
  mask << 1, 0, 1, 0;
  for (int k = 0; k < 10; ++k) adam_step(opt, {{"w", flat(w), flat(g), flat(mask)}}, 0.05);
  EXPECT_EQ(w[1], 1.0);
  EXPECT_EQ(w[3], 1.0);
  EXPECT_LT(w[0], 1.0);
  EXPECT_EQ(opt.slots().at("w").m[1], 0.0);
}

TEST(Adam, DeterministicGivenStateAndGradient) {
  Adam a, b;
  Eigen::VectorXd wa = Eigen::VectorXd::LinSpaced(3, 0, 1), wb = wa, g(3);
  g << 0.3, -0.2, 0.9;
  for (int k = 0; k < 20; ++k) {
    adam_step(a, {{"w", flat(wa), flat(g), {}}}, 0.01);
    adam_step(b, {{"w", flat(wb), flat(g), {}}}, 0.01);
  }
  EXPECT_EQ(wa, wb);
}

TEST(Adam, RejectsNonFiniteGradient) {
  Adam opt;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(2), g(2);
  g << 0.0, std::nan("");
  EXPECT_THROW(adam_step(opt, {{"w", flat(w), flat(g), {}}}, 0.01), DivergenceError);
}

TEST(Adam, WeightDecayPullsTowardZero) {
  AdamConfig cfg;
  cfg.weight_decay = 1e-2;
  Adam opt(cfg);
  Eigen::VectorXd w = Eigen::VectorXd::Constant(1, 2.0), g = Eigen::VectorXd::Zero(1);
  adam_step(opt, {{"w", flat(w), flat(g), {}}}, 0.1);
  EXPECT_LT(w[0], 2.0);
}

TEST(Adam, ResetClearsMoments) {
  Adam opt;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(2), g = Eigen::VectorXd::Ones(2);
  adam_step(opt, {{"w", flat(w), flat(g), {}}}, 0.01);
  opt.reset("w", 1);
  EXPECT_EQ(opt.slots().at("w").m[1], 0.0);
  EXPECT_EQ(opt.slots().at("w").v[1], 0.0);
  EXPECT_GT(opt.slots().at("w").m[0], 0.0);
}

TEST(LrSchedule, Examples) {
  LrSchedule s{0.01, 0.8, 2500};
  EXPECT_EQ(lr_at(s, 0), 0.01);
  EXPECT_EQ(lr_at(s, 2499), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(s, 5000), 0.0064);
  LrSchedule flat_rate{0.1, 1.0, 10};
  EXPECT_EQ(lr_at(flat_rate, 123456), 0.1);
  EXPECT_THROW(lr_at(s, -1), ConfigError);
  EXPECT_THROW((LrSchedule{0.1, 1.5, 1}.validate()), ConfigError);
}
