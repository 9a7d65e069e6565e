#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lsnn/grad_engine.hpp"
#include "support/random_network.hpp"
#include "support/reverse_mode_oracle.hpp"

using namespace lsnn;
using testing_support::max_rel_error;

TEST(PseudoDerivative, Values) {
  EXPECT_EQ(pseudo_derivative(1.0, 0.3), 0.0);
  EXPECT_EQ(pseudo_derivative(-1.7, 0.3), 0.0);
  EXPECT_DOUBLE_EQ(pseudo_derivative(0.0, 0.3), 0.3);
  EXPECT_DOUBLE_EQ(pseudo_derivative(-0.5, 0.4), 0.2);
}

TEST(Backward, ZeroCotangentGivesZeroGradients) {
  std::mt19937_64 gen(1);
  testing_support::RandomNetSpec spec;
  const auto p = testing_support::random_network(spec, gen);
  const auto x = testing_support::random_spikes(30, spec.n_in, 0.3, gen);
  const auto r = simulate(p, x, true, gen);
  Cotangents cot;
  cot.readout = Trace::Zero(30, spec.n_out);
  const auto g = backward(*r.tape, p, cot);
  EXPECT_EQ(g.w_in.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.w_rec.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.w_out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, MatchesNaiveReverseModeOracle) {
  std::mt19937_64 gen(2024);
  int spiking_cases = 0;
  for (int trial = 0; trial < 12; ++trial) {
    testing_support::RandomNetSpec spec;
    spec.n_in = 5;
    spec.n_rec = 8;
    spec.n_out = 3;
    spec.max_delay = 1 + trial % 4;
    spec.weight_scale = 1.5;
    spec.noise = trial % 2 == 0;
    spec.tau_out = trial % 3 == 0 ? 0.0 : 15.0;
    const auto p = testing_support::random_network(spec, gen);
    const int T = 40;
    const auto x = testing_support::random_spikes(T, spec.n_in, 0.3, gen);
    const Trace noise = draw_noise(p, T, gen);
    const auto r = simulate(p, x, noise, true);
    if (r.raster.sum() > 0) ++spiking_cases;

    LossSpec ls;
    ls.kind = LossKind::cross_entropy_avg;
    ls.window = 10;
    ls.rate_coeff = 0.7;
    ls.rate_target_hz = 20.0;
    SupervisedTarget target;
    target.label = trial % 3;
    BackwardOptions opt;
    opt.gamma = 0.3;
    opt.noise_gradient = true;
    opt.reset_gradient = trial % 5 != 4;
    const auto [loss, g] = loss_and_gradients(*r.tape, p, ls, target, opt);

    oracle::LossSetup setup;
    setup.ce_window = 10;
    setup.label = target.label;
    setup.rate_coeff = 0.7;
    setup.rate_target_hz = 20.0;
    setup.gamma = 0.3;
    setup.reset_gradient = opt.reset_gradient;
    const auto o = oracle::run(p, x, noise, setup);

    ASSERT_TRUE(o.raster == r.raster) << "trial " << trial;
    EXPECT_NEAR(loss.total, o.loss, 1e-12 * std::abs(o.loss));
    const Matrix gin = g.w_in.cwiseProduct(p.mask_in), grec = g.w_rec.cwiseProduct(p.mask_rec);
    EXPECT_LT(max_rel_error(gin, o.w_in), 1e-10) << "trial " << trial;
    EXPECT_LT(max_rel_error(grec, o.w_rec), 1e-10) << "trial " << trial;
    EXPECT_LT(max_rel_error(g.w_out, o.w_out), 1e-10) << "trial " << trial;
    if (spec.noise) EXPECT_LT(max_rel_error(g.noise_sigma, o.noise_sigma), 1e-10);
    EXPECT_GT(o.w_rec.cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_GE(spiking_cases, 10);
}

namespace {

// Readout MSE plus voltage MSE; the latter keeps the spike-free problem non-trivial.
double smooth_loss(const NetworkParams& p, const Trace& x, const Trace& y_target, const Trace& v_target,
                   Cotangents* cot_out = nullptr, SimTape* tape_out = nullptr) {
  auto r = simulate(p, x, Trace(), true);
  const auto ly = loss_mse(r.tape->readout, y_target);
  const auto lv = loss_mse(r.tape->voltage, v_target);
  if (cot_out) {
    cot_out->readout = ly.cotangent;
    cot_out->voltage = lv.cotangent;
  }
  if (tape_out) *tape_out = *r.tape;
  return ly.value + lv.value;
}

}  // namespace

TEST(Backward, SpikeFreeFiniteDifferences) {
  std::mt19937_64 gen(99);
  testing_support::RandomNetSpec spec;
  spec.n_rec = 8;
  spec.max_delay = 3;
  auto p = testing_support::random_network(spec, gen);
  for (auto& n : p.neurons) n.b0 = 1e6;
  const int T = 50;
  const auto x = testing_support::random_spikes(T, spec.n_in, 0.4, gen);
  std::normal_distribution<double> normal(0.0, 1.0);
  Trace yt(T, spec.n_out), vt(T, spec.n_rec);
  for (Eigen::Index k = 0; k < yt.size(); ++k) yt.data()[k] = 0.1 * normal(gen);
  for (Eigen::Index k = 0; k < vt.size(); ++k) vt.data()[k] = 0.01 * normal(gen);

  Cotangents cot;
  SimTape tape;
  smooth_loss(p, x, yt, vt, &cot, &tape);
  ASSERT_EQ(tape.spikes.sum(), 0.0);
  const auto g = backward(tape, p, cot);
  const double h = 1e-5;
  for (int dir = 0; dir < 20; ++dir) {
    NetworkParams plus = p, minus = p;
    double analytic = 0.0;
    auto perturb = [&](Matrix NetworkParams::*w, const Matrix NetworkParams::*mask, const Matrix& grad) {
      Matrix u(grad.rows(), grad.cols());
      for (Eigen::Index k = 0; k < u.size(); ++k) u.data()[k] = normal(gen);
      u = u.cwiseProduct(p.*mask);
      plus.*w += h * u;
      minus.*w -= h * u;
      analytic += grad.cwiseProduct(u).sum();
    };
    perturb(&NetworkParams::w_in, &NetworkParams::mask_in, g.w_in);
    perturb(&NetworkParams::w_rec, &NetworkParams::mask_rec, g.w_rec);
    perturb(&NetworkParams::w_out, &NetworkParams::mask_out, g.w_out);
    const double fd = (smooth_loss(plus, x, yt, vt) - smooth_loss(minus, x, yt, vt)) / (2 * h);
    EXPECT_LT(std::abs(fd - analytic), 1e-4 * std::max(std::abs(fd), std::abs(analytic))) << "direction " << dir;
  }
}

TEST(Backward, DampeningScalesSingleSpikePathsLinearly) {
  // input -> n0 -> n1 -> readout. The w_rec(1,0) gradient crosses one spike
  // nonlinearity (n1); the w_in(0,0) gradient crosses two (n0 and n1).
  auto p = make_network(1, 2, 1, NeuronParams{});
  p.w_in(0, 0) = 0.3;
  p.w_rec(1, 0) = 0.35;
  p.w_out(0, 1) = 1.0;
  Trace x = Trace::Zero(30, 1);
  x(3, 0) = 1.0;
  std::mt19937_64 rng(0);
  const auto r = simulate(p, x, true, rng);
  ASSERT_EQ(r.raster.col(0).sum(), 1.0);
  ASSERT_EQ(r.raster.col(1).sum(), 1.0);
  Cotangents cot;
  cot.readout = Trace::Ones(30, 1);
  BackwardOptions a, b;
  a.gamma = 0.2;
  b.gamma = 0.4;
  a.reset_gradient = b.reset_gradient = false;
  const auto ga = backward(*r.tape, p, cot, a), gb = backward(*r.tape, p, cot, b);
  ASSERT_NE(ga.w_rec(1, 0), 0.0);
  EXPECT_NEAR(gb.w_rec(1, 0), 2.0 * ga.w_rec(1, 0), 1e-12 * std::abs(gb.w_rec(1, 0)));
  EXPECT_NEAR(gb.w_in(0, 0), 4.0 * ga.w_in(0, 0), 1e-12 * std::abs(gb.w_in(0, 0)));
  EXPECT_EQ(ga.w_out(0, 1), gb.w_out(0, 1));
}

TEST(Backward, AdaptationStateCarriesGradientUndampened) {
  // gamma = 0 removes every spike derivative, yet the threshold adjoint still
  // travels back across the silent interval between two spikes, decaying
  // with rho rather than with gamma.
  NeuronParams np;
  np.beta = 1.8;
  np.tau_a = 200.0;
  auto p = make_network(1, 1, 1, np);
  p.w_in(0, 0) = 0.4;
  Trace x = Trace::Zero(120, 1);
  x(9, 0) = 1.0;
  x(59, 0) = 1.0;
  std::mt19937_64 rng(0);
  const auto r = simulate(p, x, true, rng);
  ASSERT_EQ(r.raster(10, 0), 1.0);
  ASSERT_EQ(r.raster(60, 0), 1.0);
  ASSERT_EQ(r.raster.sum(), 2.0);
  Cotangents cot;
  cot.voltage = Trace::Zero(120, 1);
  cot.voltage(100, 0) = 1.0;
  BackwardOptions opt;
  opt.gamma = 0.0;
  opt.keep_adaptation_adjoint = true;
  const auto g = backward(*r.tape, p, cot, opt);
  const double rho = std::exp(-1.0 / 200.0);
  const double late = g.adaptation_adjoint(50, 0), early = g.adaptation_adjoint(20, 0);
  ASSERT_NE(late, 0.0);
  EXPECT_NEAR(early, std::pow(rho, 30) * late, 1e-12 * std::abs(late));
}

TEST(Backward, NonFiniteCotangentNamesTheStep) {
  auto p = make_network(1, 2, 1, NeuronParams{});
  std::mt19937_64 rng(0);
  const auto r = simulate(p, Trace::Zero(10, 1), true, rng);
  Cotangents cot;
  cot.voltage = Trace::Zero(10, 2);
  cot.voltage(6, 1) = std::numeric_limits<double>::quiet_NaN();
  try {
    backward(*r.tape, p, cot);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step, 6);
    EXPECT_EQ(e.index, 1);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogOfClassCount) {
  const auto l = loss_crossentropy_avg(Trace::Constant(20, 10, 0.4), 5, 3);
  EXPECT_NEAR(l.value, std::log(10.0), 1e-14);
}

TEST(CrossEntropy, DominantMargin) {
  Trace y = Trace::Zero(8, 2);
  y.col(1).setConstant(10.0);
  EXPECT_LT(loss_crossentropy_avg(y, 4, 1).value, 1e-4);
  Trace y10 = Trace::Zero(8, 10);
  y10.col(7).setConstant(10.0);
  EXPECT_NEAR(loss_crossentropy_avg(y10, 4, 7).value, std::log1p(9.0 * std::exp(-10.0)), 1e-14);
}

TEST(CrossEntropy, CotangentIsConfinedToTheWindow) {
  std::mt19937_64 gen(3);
  const auto y = testing_support::random_spikes(30, 4, 0.5, gen);
  const auto l = loss_crossentropy_avg(y, 7, 2);
  EXPECT_EQ(l.cotangent.topRows(23).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(l.cotangent.bottomRows(7).cwiseAbs().maxCoeff(), 0.0);
  const auto whole = loss_crossentropy_avg(y, 30, 2);
  Trace mean(1, 4);
  mean.row(0) = y.colwise().mean();
  EXPECT_NEAR(whole.value, loss_crossentropy_avg(mean, 1, 2).value, 1e-14);
}

TEST(CrossEntropy, RejectsBadLabelAndWindow) {
  EXPECT_THROW(loss_crossentropy_avg(Trace::Zero(5, 3), 2, 3), ConfigError);
  EXPECT_THROW(loss_crossentropy_avg(Trace::Zero(5, 3), 6, 0), ConfigError);
}

TEST(Mse, Examples) {
  Trace a(2, 2);
  a << 1, 2, 3, 4;
  EXPECT_EQ(loss_mse(a, a).value, 0.0);
  EXPECT_DOUBLE_EQ(loss_mse(a, a.array() + 0.5).value, 0.25);
  Trace b(2, 2);
  b << 0, 2, 5, 1;
  EXPECT_DOUBLE_EQ(loss_mse(a, b).value, (1.0 + 0.0 + 4.0 + 9.0) / 4.0);
  EXPECT_THROW(loss_mse(a, Trace::Zero(3, 2)), ConfigError);
}

TEST(RateRegularizer, ExactTargetAndSilentNetwork) {
  Trace r = Trace::Zero(1000, 4);
  for (int j = 0; j < 4; ++j)
    for (int k = 0; k < 20; ++k) r(k * 50 + j, j) = 1.0;
  EXPECT_NEAR(firing_rate_regularizer(r, 20.0, 1.0).value, 0.0, 1e-20);
  EXPECT_DOUBLE_EQ(firing_rate_regularizer(Trace::Zero(500, 6), 20.0, 1.0).value, 400.0);
  EXPECT_DOUBLE_EQ(firing_rate_regularizer(Trace::Zero(500, 6), 20.0, 1.0, RateUnit::per_ms).value, 0.02 * 0.02);
}
