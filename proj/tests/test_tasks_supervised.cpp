#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "lsnn/tasks_supervised.hpp"

using namespace lsnn;

TEST(TargetNetwork, ZeroParametersGiveHalf) {
  const auto tn = TargetNetwork::from_params(std::vector<double>(40, 0.0));
  EXPECT_DOUBLE_EQ(eval_tn(tn, 0.3, -0.2), 0.5);
}

TEST(TargetNetwork, MatchesHandForwardPass) {
  std::vector<double> v(40);
  for (int i = 0; i < 40; ++i) v[i] = 0.9 * std::sin(i + 1.0);
  const auto tn = TargetNetwork::from_params(v);
  EXPECT_NEAR(eval_tn(tn, 0.3, -0.7), 0.48735997667401376, 1e-14);
}

TEST(TargetNetwork, RangesHold) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 100000; ++k) {
    const auto tn = gen_target_network(rng);
    ASSERT_LE(tn.w1.cwiseAbs().maxCoeff(), 1.0);
    ASSERT_LE(tn.b1.cwiseAbs().maxCoeff(), 1.0);
    ASSERT_LE(tn.w2.cwiseAbs().maxCoeff(), 1.0);
    if (k < 10000) {
      const double y = eval_tn(tn, u(rng), u(rng));
      ASSERT_GT(y, 0.0);
      ASSERT_LT(y, 1.0);
    }
  }
}

TEST(Sinus, Examples) {
  EXPECT_DOUBLE_EQ(eval_sinus({1.0, 0.0}, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(eval_sinus({5.0, std::numbers::pi / 2}, 0.0), 5.0);
  EXPECT_NEAR(eval_sinus({2.0, 1.0}, 0.4), eval_sinus({2.0, 1.0}, 0.4 + 2 * std::numbers::pi), 1e-12);
  std::mt19937_64 rng(4);
  for (int k = 0; k < 1000; ++k) {
    const auto t = gen_sinus(rng);
    ASSERT_GE(t.amplitude, 0.1);
    ASSERT_LE(t.amplitude, 5.0);
    ASSERT_GE(t.phase, 0.0);
    ASSERT_LE(t.phase, std::numbers::pi);
  }
}

TEST(L2LEpisode, TeacherIsPreviousTarget) {
  for (const char* family : {"sinus", "tn"}) {
    L2LConfig cfg;
    cfg.family = family;
    cfg.n_steps = 30;
    cfg.sigma_fraction = 0.01;
    std::mt19937_64 rng(5);
    for (int e = 0; e < 5; ++e) {
      const auto ep = build_l2l_episode(cfg, rng);
      ASSERT_EQ(ep.target.size(), 30);
      ASSERT_EQ(ep.spikes.rows(), 30 * 20);
      ASSERT_EQ(ep.spikes.cols(), cfg.n_in());
      EXPECT_EQ(ep.teacher[0], 0.0);
      for (int k = 1; k < 30; ++k) EXPECT_EQ(ep.teacher[k], ep.target[k - 1]);
    }
  }
  L2LConfig tn;
  tn.family = "tn";
  EXPECT_EQ(tn.n_in(), 300);
}

TEST(L2LEpisode, FirstTeacherWindowEncodesZero) {
  // With a wide tuning curve the teacher population fires around the centre
  // neuron coding 0 in the first step.
  L2LConfig cfg;
  cfg.n_steps = 2;
  cfg.step_ms = 2000;
  cfg.sigma_fraction = 0.02;
  std::mt19937_64 rng(6);
  const auto ep = build_l2l_episode(cfg, rng);
  const Eigen::RowVectorXd counts = ep.spikes.topRows(2000).rightCols(100).colwise().sum();
  Eigen::Index arg = 0;
  counts.maxCoeff(&arg);
  const auto spec = TuningCurveSpec::regression(-5.0, 5.0, 100, 200.0, 0.02);
  EXPECT_NEAR(spec.center(static_cast<int>(arg)), 0.0, 0.11);
}

TEST(L2LPrediction, WindowSpikeCountOverStepLength) {
  NetworkParams p = make_network(1, 3, 1, NeuronParams{});
  p.tau_out = 0.0;
  p.w_out << 0.5, -0.25, 2.0;
  std::mt19937_64 rng(7);
  Trace x = Trace::Zero(60, 1);
  p.w_in << 1.0, 1.0, 0.0;
  for (int t = 0; t < 60; t += 3) x(t, 0) = 1.0;
  const auto r = simulate(p, x, false, rng);
  const Vector pred = l2l_predictions(r.readout, 20);
  for (int k = 0; k < 3; ++k) {
    const Eigen::RowVectorXd count = r.raster.middleRows(k * 20, 20).colwise().sum();
    EXPECT_NEAR(pred[k], count.dot(p.w_out.row(0)) / 20.0, 1e-12);
  }
  EXPECT_GT(r.raster.sum(), 0.0);
}

TEST(L2LLoss, CotangentMatchesFiniteDifference) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  Trace y(40, 1);
  for (int t = 0; t < 40; ++t) y(t, 0) = n(rng);
  Vector target(4);
  target << 0.3, -1.0, 2.0, 0.0;
  const auto lv = l2l_loss(y, target, 10);
  for (int t : {0, 13, 39}) {
    Trace a = y, b = y;
    a(t, 0) += 1e-6;
    b(t, 0) -= 1e-6;
    EXPECT_NEAR((l2l_loss(a, target, 10).value - l2l_loss(b, target, 10).value) / 2e-6, lv.cotangent(t, 0), 1e-8);
  }
}

TEST(Ridge, ZeroTargetsGiveZeroModel) {
  std::mt19937_64 rng(9);
  Trace X = Trace::Random(50, 8);
  const auto m = ridge_fit(X, Vector::Zero(50), 100.0);
  EXPECT_LT(m.w.cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(ridge_mse(m, X, Vector::Zero(50)), 0.0);
}

TEST(Ridge, MatchesNormalEquations) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Trace X(30, 6);
    Vector y(30);
    for (Eigen::Index k = 0; k < X.size(); ++k) X.data()[k] = n(rng);
    for (int k = 0; k < 30; ++k) y[k] = n(rng);
    const double reg = 0.5 + trial;
    const auto m = ridge_fit(X, y, reg);
    // Augmented system with an unpenalized bias column.
    Matrix A(30, 7);
    A.leftCols(6) = X;
    A.col(6).setOnes();
    Matrix G = A.transpose() * A;
    G.diagonal().head(6).array() += reg;
    const Vector sol = G.fullPivLu().solve(A.transpose() * y);
    EXPECT_LT((sol.head(6) - m.w).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(sol[6], m.bias, 1e-8);
  }
}

TEST(Ridge, ExactLinearTargetsVanishingRegularization) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  Trace X(40, 5);
  for (Eigen::Index k = 0; k < X.size(); ++k) X.data()[k] = n(rng);
  Vector w(5);
  w << 1, -2, 0.5, 0, 3;
  const Vector y = (X * w).array() + 0.7;
  const auto m = ridge_fit(X, y, 1e-12);
  EXPECT_LT(ridge_mse(m, X, y), 1e-18);
}

TEST(Ridge, SplitAndOnlineProtocols) {
  std::mt19937_64 rng(12);
  const auto [train, test] = split_steps(100, 0.9, rng);
  EXPECT_EQ(train.size(), 90u);
  EXPECT_EQ(test.size(), 10u);
  Trace X = Trace::Random(20, 4);
  Vector y = Vector::Random(20);
  const auto online = linear_baseline_online(X, y, 100.0);
  ASSERT_EQ(online.size(), 19u);
  const auto m = ridge_fit(X.topRows(7), y.head(7), 100.0);
  const double e = m.predict(X.row(7)) - y[7];
  EXPECT_NEAR(online[6], e * e, 1e-14);
}

TEST(MeanSpikingTrace, KernelAndWindow) {
  Trace raster = Trace::Zero(40, 1);
  raster(0, 0) = 1.0;
  const Trace m = mean_spiking_trace(raster, 20, 20.0, 20);
  double expect = 0.0;
  for (int s = 0; s < 20; ++s) expect += std::exp(-s / 20.0);
  EXPECT_NEAR(m(0, 0), expect / 20.0, 1e-14);
  EXPECT_EQ(m(1, 0), 0.0);  // truncated after 20 ms
}

TEST(FFBaseline, ZeroLearningRateIsFlatAndTrainingHelps) {
  std::mt19937_64 rng(13), data_rng(14);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto tn = gen_target_network(data_rng);
  Trace x(400, 2);
  Vector y(400);
  for (int k = 0; k < 400; ++k) {
    x(k, 0) = u(data_rng);
    x(k, 1) = u(data_rng);
    y[k] = eval_tn(tn, x(k, 0), x(k, 1));
  }
  FFBaselineConfig flat;
  flat.lr = 0.0;
  const auto c0 = ff_backprop_baseline(x.topRows(1).replicate(10, 1), y.head(1).replicate(10, 1), flat, rng);
  for (double c : c0) EXPECT_DOUBLE_EQ(c, c0[0]);
  const auto c = ff_backprop_baseline(x, y, FFBaselineConfig{}, rng);
  double early = 0.0, late = 0.0;
  for (int k = 0; k < 50; ++k) early += c[k];
  for (int k = 350; k < 400; ++k) late += c[k];
  EXPECT_LT(late, early);
}

TEST(DelayedCue, InputLayout) {
  DelayedCueConfig cfg;
  std::mt19937_64 rng(15);
  const Trace x = delayed_cue_input(cfg, 1, rng);
  ASSERT_EQ(x.rows(), 750);
  ASSERT_EQ(x.cols(), 30);
  EXPECT_EQ(x.block(0, 0, 750, 10).sum(), 0.0);
  EXPECT_GT(x.block(0, 10, 100, 10).sum(), 0.0);
  EXPECT_EQ(x.block(100, 0, 600, 30).sum(), 0.0);
  EXPECT_GT(x.block(700, 20, 50, 10).sum(), 0.0);
}

TEST(SeqPixel, EncodingLayout) {
  SeqPixelConfig cfg;
  cfg.readout_window = 5;
  Eigen::RowVectorXd img(4);
  img << 0.0, 0.6, 0.6, 0.1;
  std::mt19937_64 rng(16);
  const Trace x = encode_pixel_sequence(img, cfg, rng);
  ASSERT_EQ(x.rows(), 9);
  ASSERT_EQ(x.cols(), 81);
  ThresholdCodeSpec spec{40};
  int up = 0;
  for (int k = 0; k < 40; ++k) up += spec.level(k) <= 0.6 ? 1 : 0;
  EXPECT_EQ(x.row(1).head(40).sum(), up);
  EXPECT_EQ(x.row(2).sum(), 0.0);
  EXPECT_GT(x.row(3).segment(40, 40).sum(), 0.0);
  EXPECT_EQ(x.col(80).head(4).sum(), 0.0);
  EXPECT_EQ(x.col(80).tail(5).sum(), 5.0);
  cfg.pixel_ms = 2;
  EXPECT_EQ(encode_pixel_sequence(img, cfg, rng).rows(), 13);
}

TEST(BuildNetwork, DalePopulationsAndInvariants) {
  NetworkConfig net;
  net.n_regular = 30;
  net.n_inhibitory = 10;
  net.n_adaptive = 20;
  net.init = "dale";
  net.connectivity = 0.2;
  net.delay_rec_max = 5;
  std::mt19937_64 rng(17);
  const auto p = build_network(net, 12, 3, rng);
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ((*p.rec_signs).head(20).minCoeff(), 1.0);
  EXPECT_EQ(p.n_rec(), 50);
  EXPECT_EQ((*p.rec_signs).segment(20, 10).maxCoeff(), -1.0);
  EXPECT_EQ((*p.rec_signs).tail(20).minCoeff(), 1.0);
  EXPECT_EQ(p.neurons[0].beta, 0.0);
  EXPECT_EQ(p.neurons[29].beta, 0.0);
  EXPECT_EQ(p.neurons[49].beta, net.beta);
  EXPECT_EQ(p.mask_rec.sum(), std::round(0.2 * 50 * 50));
  EXPECT_EQ(p.delay_rec.maxCoeff(), 5);
}

TEST(NetworkConfig, ValidationListsProblems) {
  NetworkConfig net;
  net.tau_m = -1.0;
  net.connectivity = 1.5;
  try {
    net.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("tau_m"), std::string::npos);
    EXPECT_NE(what.find("connectivity"), std::string::npos);
  }
}

TEST(L2LTraining, SmokeRunIsFinite) {
  L2LConfig cfg;
  cfg.n_steps = 10;
  cfg.sigma_fraction = 0.01;
  cfg.test_episodes = 2;
  NetworkConfig net;
  net.n_regular = 12;
  net.n_adaptive = 8;
  net.tau_out = 0.0;
  TrainConfig train;
  train.iterations = 5;
  train.batch_size = 2;
  train.rate_coeff = 30.0;
  train.rate_target_hz = 20.0;
  auto s = make_l2l_state(cfg, net, train, 18);
  int rows = 0;
  TrainHooks hooks;
  hooks.metrics = [&](const MetricRow& r) {
    ++rows;
    EXPECT_TRUE(std::isfinite(r.loss));
  };
  train_l2l_outer(cfg, net, train, s, hooks);
  EXPECT_EQ(rows, 5);
  EXPECT_EQ(s.iteration, 5);
  const auto ev = evaluate_l2l(cfg, s.params, s.rng);
  EXPECT_EQ(ev.lsnn_mse.size(), 2u);
  EXPECT_TRUE(std::isfinite(ev.ridge_mse[0]));
}
