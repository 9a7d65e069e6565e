#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lsnn/init_rewire.hpp"

using namespace lsnn;

namespace {

double sample_std(const Matrix& w) {
  const double mean = w.mean();
  return std::sqrt((w.array() - mean).square().sum() / static_cast<double>(w.size() - 1));
}

// Dale network with `p` connectivity on every matrix.
NetworkParams dale_network(int n_in, int n_rec, int n_out, double p, std::mt19937_64& rng) {
  auto net = make_network(n_in, n_rec, n_out, NeuronParams{});
  net.in_signs = draw_signs(n_in, 0.75, rng);
  net.rec_signs = draw_signs(n_rec, 0.8, rng);
  net.mask_in = sparse_mask(n_rec, n_in, p, rng);
  net.mask_rec = sparse_mask(n_rec, n_rec, p, rng, true);
  net.mask_out = sparse_mask(n_out, n_rec, p, rng);
  net.w_in = init_dale(n_rec, n_in, *net.in_signs, 1.0, rng, &net.mask_in);
  net.w_rec = init_dale(n_rec, n_rec, *net.rec_signs, 1.0, rng, &net.mask_rec);
  net.w_out = init_dale(n_out, n_rec, *net.rec_signs, 1.0, rng, &net.mask_out);
  return net;
}

}  // namespace

TEST(InitGaussian, StandardDeviation) {
  std::mt19937_64 rng(3);
  const Matrix w = init_gaussian(100000, 1, 1.0, rng);
  EXPECT_NEAR(sample_std(w), 1.0, 0.03);
  std::mt19937_64 a(5), b(5);
  const Matrix w1 = init_gaussian(200, 50, 1.0, a), w2 = init_gaussian(200, 50, 2.0, b);
  EXPECT_TRUE(w2.isApprox(2.0 * w1, 1e-15));
  EXPECT_NEAR(sample_std(w1), 1.0 / std::sqrt(50.0), 0.03 / std::sqrt(50.0));
  std::mt19937_64 c(5);
  EXPECT_EQ(init_gaussian(200, 50, 1.0, c), w1);
}

TEST(InitDale, ZeroRowSumsAndUnitSpectralRadius) {
  std::mt19937_64 rng(11);
  const Vector signs = draw_signs(60, 0.8, rng);
  const Matrix w = init_dale(60, 60, signs, 1.0, rng);
  for (Eigen::Index j = 0; j < w.rows(); ++j) {
    const double scale = w.row(j).cwiseAbs().sum();
    EXPECT_LT(std::abs(w.row(j).sum()), 1e-9 * scale) << "row " << j;
  }
  EXPECT_NEAR(spectral_radius(w), 1.0, 1e-6);
}

TEST(InitDale, ColumnSignsRespected) {
  std::mt19937_64 rng(12);
  for (auto [rows, cols] : {std::pair{40, 40}, std::pair{50, 20}, std::pair{10, 50}}) {
    const Vector signs = draw_signs(cols, 0.7, rng);
    const Matrix w = init_dale(rows, cols, signs, 0.5, rng);
    ASSERT_EQ(w.rows(), rows);
    ASSERT_EQ(w.cols(), cols);
    for (int i = 0; i < cols; ++i)
      for (int j = 0; j < rows; ++j) EXPECT_GE(w(j, i) * signs[i], 0.0) << rows << "x" << cols;
  }
}

TEST(InitDale, AllExcitatorySkipsShift) {
  std::mt19937_64 rng(13);
  const Matrix w = init_dale(30, 30, Vector::Ones(30), 1.0, rng);
  EXPECT_GE(w.minCoeff(), 0.0);
  EXPECT_GT(w.row(0).sum(), 0.0);
  EXPECT_NEAR(spectral_radius(w), 1.0, 1e-6);
}

TEST(InitDale, MaskedSquareKeepsZeroSumOnActiveEntries) {
  std::mt19937_64 rng(14);
  const Vector signs = draw_signs(80, 0.8, rng);
  const Matrix mask = sparse_mask(80, 80, 0.3, rng, true);
  const Matrix w = init_dale(80, 80, signs, 1.0, rng, &mask);
  EXPECT_EQ((w.array() != 0.0 && mask.array() == 0.0).count(), 0);
  EXPECT_NEAR(spectral_radius(w), 1.0, 1e-6);
}

TEST(SparseMask, ExactCounts) {
  std::mt19937_64 rng(1);
  const Matrix m = sparse_mask(220, 220, 0.12, rng, true);
  EXPECT_EQ(m.sum(), 5808.0);
  EXPECT_EQ(m.diagonal().sum(), 0.0);
  const Matrix full = sparse_mask(10, 10, 1.0, rng, true);
  EXPECT_EQ(full.sum(), 90.0);
  EXPECT_EQ(full.diagonal().sum(), 0.0);
  std::mt19937_64 a(1), b(2);
  EXPECT_NE(sparse_mask(50, 50, 0.2, a), sparse_mask(50, 50, 0.2, b));
  EXPECT_THROW(sparse_mask(5, 5, 0.0, rng), ConfigError);
}

TEST(Deepr, ZeroGradientWithoutShrinkageIsIdentity) {
  std::mt19937_64 rng(21);
  auto p = dale_network(6, 20, 3, 0.3, rng);
  auto signs = synapse_signs(p, rng);
  const auto before = p;
  RewireConfig cfg;
  cfg.l1_coeff = 0.0;
  const auto stats = deepr_step(p, Gradients::zeros_like(p), cfg, 0.01, rng, nullptr, signs);
  EXPECT_EQ(stats.dormant, 0);
  EXPECT_EQ(p.w_rec, before.w_rec);
  EXPECT_EQ(p.w_in, before.w_in);
  EXPECT_EQ(p.mask_rec, before.mask_rec);
}

TEST(Deepr, SignCrossingWeightGoesDormantAndIsReplaced) {
  std::mt19937_64 rng(22);
  auto p = make_network(1, 4, 1, NeuronParams{});
  p.rec_signs = Vector::Ones(4);
  p.in_signs = Vector::Ones(1);
  p.mask_rec.setZero();
  p.mask_rec(1, 0) = 1.0;
  p.mask_rec(2, 0) = 1.0;
  p.w_rec.setZero();
  p.w_rec(1, 0) = 0.001;
  p.w_rec(2, 0) = 0.5;
  auto signs = synapse_signs(p, rng);
  auto g = Gradients::zeros_like(p);
  g.w_rec(1, 0) = 0.5;  // 0.001 - 0.01 * 0.5 = -0.004
  RewireConfig cfg;
  cfg.l1_coeff = 0.0;
  cfg.rewire_in = cfg.rewire_out = false;
  const double before = p.mask_rec.sum();
  const auto stats = deepr_step(p, g, cfg, 0.01, rng, nullptr, signs);
  EXPECT_EQ(stats.dormant, 1);
  EXPECT_EQ(stats.reactivated, 1);
  EXPECT_EQ(p.mask_rec.sum(), before);
  EXPECT_EQ(p.w_rec(2, 0), 0.5);
  EXPECT_EQ(p.mask_rec.diagonal().sum(), 0.0);
  // The new synapse starts at exactly zero.
  int fresh = 0;
  for (Eigen::Index k = 0; k < p.w_rec.size(); ++k)
    if (p.mask_rec.data()[k] == 1.0 && p.w_rec.data()[k] == 0.0) ++fresh;
  EXPECT_EQ(fresh, 1);
  EXPECT_EQ(p.w_rec(1, 0), 0.0);
}

TEST(Deepr, L1ShrinksTowardZero) {
  std::mt19937_64 rng(23);
  auto p = make_network(1, 3, 1, NeuronParams{});
  p.rec_signs = Vector::Constant(3, -1.0);
  p.w_rec(0, 1) = -0.2;
  auto signs = synapse_signs(p, rng);
  RewireConfig cfg;
  deepr_step(p, Gradients::zeros_like(p), cfg, 0.1, rng, nullptr, signs);
  EXPECT_NEAR(p.w_rec(0, 1), -0.2 + 0.1 * 0.01, 1e-15);
}

TEST(Deepr, ReactivationResetsAdamMoments) {
  std::mt19937_64 rng(24);
  auto p = make_network(1, 3, 1, NeuronParams{});
  p.rec_signs = Vector::Ones(3);
  p.mask_rec.setZero();
  p.mask_rec(1, 0) = 1.0;
  p.w_rec.setZero();
  p.w_rec(1, 0) = 1e-4;
  auto signs = synapse_signs(p, rng);
  Adam adam;
  auto g = Gradients::zeros_like(p);
  g.w_rec(1, 0) = 1.0;
  RewireConfig cfg;
  cfg.rewire_in = cfg.rewire_out = false;
  const auto stats = deepr_step(p, g, cfg, 0.01, rng, &adam, signs);
  ASSERT_EQ(stats.dormant, 1);
  for (Eigen::Index k = 0; k < p.mask_rec.size(); ++k) {
    if (p.mask_rec.data()[k] == 0.0) continue;
    EXPECT_EQ(adam.slots().at("w_rec").m[k], 0.0);
    EXPECT_EQ(adam.slots().at("w_rec").v[k], 0.0);
  }
}

TEST(Deepr, GlobalBudgetConservesTotalCount) {
  std::mt19937_64 rng(25);
  auto p = dale_network(10, 30, 4, 0.2, rng);
  auto signs = synapse_signs(p, rng);
  Adam adam;
  RewireConfig cfg;
  cfg.budget = RewireBudget::global;
  const long total = active_synapses(p);
  std::normal_distribution<double> normal(0.0, 1.0);
  int events = 0;
  for (int step = 0; step < 200; ++step) {
    auto g = Gradients::zeros_like(p);
    for (Eigen::Index k = 0; k < g.w_rec.size(); ++k) g.w_rec.data()[k] = normal(rng);
    for (Eigen::Index k = 0; k < g.w_in.size(); ++k) g.w_in.data()[k] = normal(rng);
    for (Eigen::Index k = 0; k < g.w_out.size(); ++k) g.w_out.data()[k] = normal(rng);
    events += deepr_step(p, g, cfg, 0.05, rng, &adam, signs).dormant;
    ASSERT_EQ(active_synapses(p), total);
    ASSERT_NO_THROW(p.validate());
  }
  EXPECT_GT(events, 0);
}

TEST(Deepr, RandomStepsKeepCountSignsAndExactZeros) {
  std::mt19937_64 rng(26);
  auto p = make_network(1, 50, 1, NeuronParams{});
  p.rec_signs = draw_signs(50, 0.8, rng);
  p.in_signs = Vector::Ones(1);
  p.mask_rec = sparse_mask(50, 50, 0.2, rng, true);
  p.w_rec = init_dale(50, 50, *p.rec_signs, 1.0, rng, &p.mask_rec);
  auto signs = synapse_signs(p, rng);
  Adam adam;
  RewireConfig cfg;
  cfg.rewire_in = cfg.rewire_out = false;
  cfg.temperature = 1e-6;
  const double count = p.mask_rec.sum();
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int step = 0; step < 1000; ++step) {
    auto g = Gradients::zeros_like(p);
    for (Eigen::Index k = 0; k < g.w_rec.size(); ++k) g.w_rec.data()[k] = normal(rng);
    deepr_step(p, g, cfg, 0.01, rng, &adam, signs);
    ASSERT_EQ(p.mask_rec.sum(), count);
    for (int i = 0; i < 50; ++i)
      for (int j = 0; j < 50; ++j) {
        if (p.mask_rec(j, i) == 0.0) ASSERT_EQ(p.w_rec(j, i), 0.0);
        ASSERT_GE(p.w_rec(j, i) * (*p.rec_signs)[i], 0.0);
      }
  }
}

TEST(UpdateNetwork, NoiseAmplitudeStaysNonNegative) {
  std::mt19937_64 rng(27);
  auto p = make_network(1, 2, 1, NeuronParams{});
  p.noise_sigma = Vector::Constant(2, 0.001);
  auto g = Gradients::zeros_like(p);
  g.noise_sigma = Vector::Constant(2, 10.0);
  Adam adam;
  for (int k = 0; k < 5; ++k) update_network(p, g, 0.01, adam, nullptr, nullptr, rng, true);
  EXPECT_EQ(p.noise_sigma.minCoeff(), 0.0);
}

TEST(UpdateNetwork, DaleSignsHoldWithoutRewiring) {
  std::mt19937_64 rng(28);
  auto p = dale_network(6, 12, 2, 1.0, rng);
  p.apply_masks();
  const Matrix w_rec0 = p.w_rec;
  auto g = Gradients::zeros_like(p);
  // Push every weight away from its sign.
  for (Eigen::Index i = 0; i < g.w_rec.size(); ++i) g.w_rec.data()[i] = w_rec0.data()[i] > 0 ? 5.0 : -5.0;
  g.w_in = p.w_in.array().sign().matrix() * 5.0;
  g.w_out = p.w_out.array().sign().matrix() * 5.0;
  Adam adam;
  for (int k = 0; k < 200; ++k) update_network(p, g, 0.05, adam, nullptr, nullptr, rng);
  for (Eigen::Index j = 0; j < p.w_rec.rows(); ++j)
    for (Eigen::Index i = 0; i < p.w_rec.cols(); ++i) EXPECT_GE(p.w_rec(j, i) * (*p.rec_signs)[i], 0.0);
  for (Eigen::Index j = 0; j < p.w_in.rows(); ++j)
    for (Eigen::Index i = 0; i < p.w_in.cols(); ++i) EXPECT_GE(p.w_in(j, i) * (*p.in_signs)[i], 0.0);
  EXPECT_EQ(p.w_rec.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_NO_THROW(p.validate());
}
