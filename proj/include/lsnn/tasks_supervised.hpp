#pragma once

// Supervised task harnesses: learning-to-learn regression from a teacher
// (target networks and sinusoids), the delayed-cue memory task, sequential
// pixel classification, and the ridge and feed-forward baselines.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lsnn/dataset.hpp"
#include "lsnn/encode.hpp"
#include "lsnn/errors.hpp"
#include "lsnn/grad_engine.hpp"
#include "lsnn/optim.hpp"
#include "lsnn/training.hpp"

namespace lsnn {

// ---------------------------------------------------------------------------
// Function families

/// 2 -> 10 sigmoid hidden -> 1 sigmoid output; 30 weights and 10 biases.
struct TargetNetwork {
  Eigen::Matrix<double, 10, 2> w1;
  Eigen::Matrix<double, 10, 1> b1;
  Eigen::Matrix<double, 10, 1> w2;

  /// Parameters in the order w1 (row-major), b1, w2.
  static TargetNetwork from_params(const std::vector<double>& v) {
    if (v.size() != 40) throw ConfigError("TargetNetwork: need 40 parameters");
    TargetNetwork tn;
    for (int j = 0; j < 10; ++j) {
      tn.w1(j, 0) = v[2 * j];
      tn.w1(j, 1) = v[2 * j + 1];
      tn.b1[j] = v[20 + j];
      tn.w2[j] = v[30 + j];
    }
    return tn;
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline TargetNetwork gen_target_network(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(40);
  for (auto& x : v) x = u(rng);
  return TargetNetwork::from_params(v);
}

inline double eval_tn(const TargetNetwork& tn, double x1, double x2) {
  double out = 0.0;
  for (int j = 0; j < 10; ++j) out += tn.w2[j] * sigmoid(tn.w1(j, 0) * x1 + tn.w1(j, 1) * x2 + tn.b1[j]);
  return sigmoid(out);
}

struct SinusTask {
  double amplitude = 1.0;  // [0.1, 5]
  double phase = 0.0;      // [0, pi]
};

inline SinusTask gen_sinus(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> a(0.1, 5.0), ph(0.0, std::numbers::pi);
  const double amp = a(rng);
  return {amp, ph(rng)};
}

inline double eval_sinus(const SinusTask& task, double x) { return task.amplitude * std::sin(task.phase + x); }

// ---------------------------------------------------------------------------
// Learning-to-learn episodes

struct L2LConfig {
  std::string family = "sinus";  // sinus | tn
  int n_steps = 100;
  int step_ms = 20;
  int neurons_per_dim = 100;
  double r_max_hz = 200.0;
  double sigma_fraction = 1e-3;  // tuning width relative to the encoded range
  int test_episodes = 10;
  double ridge_reg = 100.0;
  double ridge_train_fraction = 0.9;
  double trace_tau_ms = 20.0;
  int trace_width_ms = 20;

  bool sinus() const { return family == "sinus"; }
  int input_dims() const { return sinus() ? 1 : 2; }
  int n_in() const { return (input_dims() + 1) * neurons_per_dim; }

  void validate() const {
    if (family != "sinus" && family != "tn") throw ConfigError("l2l.family must be 'sinus' or 'tn'");
    if (n_steps < 2) throw ConfigError("l2l.n_steps must be >= 2");
    if (step_ms < 1) throw ConfigError("l2l.step_ms must be >= 1");
    if (neurons_per_dim < 2) throw ConfigError("l2l.neurons_per_dim must be >= 2");
    if (!(sigma_fraction > 0.0)) throw ConfigError("l2l.sigma_fraction must be > 0");
    if (!(ridge_reg >= 0.0)) throw ConfigError("l2l.ridge_reg must be >= 0");
    if (!(ridge_train_fraction > 0.0 && ridge_train_fraction < 1.0))
      throw ConfigError("l2l.ridge_train_fraction must be in (0, 1)");
    if (test_episodes < 1) throw ConfigError("l2l.test_episodes must be >= 1");
  }
};

struct L2LEpisode {
  Trace x;             // n_steps x dims, the presented inputs
  Vector target;       // C(x_k)
  Vector teacher;      // C(x_{k-1}), 0 at k = 0
  Trace spikes;        // (n_steps * step_ms) x n_in
};

/// Draws one task from the family and encodes an episode for it.
inline L2LEpisode build_l2l_episode(const L2LConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int dims = cfg.input_dims();
  const double lo = cfg.sinus() ? -5.0 : -1.0, hi = cfg.sinus() ? 5.0 : 1.0;
  const double t_lo = cfg.sinus() ? -5.0 : 0.0, t_hi = cfg.sinus() ? 5.0 : 1.0;
  const auto in_spec = TuningCurveSpec::regression(lo, hi, cfg.neurons_per_dim, cfg.r_max_hz, cfg.sigma_fraction);
  const auto teach_spec =
      TuningCurveSpec::regression(t_lo, t_hi, cfg.neurons_per_dim, cfg.r_max_hz, cfg.sigma_fraction);

  SinusTask sinus;
  TargetNetwork tn;
  if (cfg.sinus())
    sinus = gen_sinus(rng);
  else
    tn = gen_target_network(rng);

  L2LEpisode ep;
  std::uniform_real_distribution<double> ux(lo, hi);
  ep.x.resize(cfg.n_steps, dims);
  ep.target.resize(cfg.n_steps);
  ep.teacher.resize(cfg.n_steps);
  for (int k = 0; k < cfg.n_steps; ++k) {
    for (int d = 0; d < dims; ++d) ep.x(k, d) = ux(rng);
    ep.target[k] = cfg.sinus() ? eval_sinus(sinus, ep.x(k, 0)) : eval_tn(tn, ep.x(k, 0), ep.x(k, 1));
    ep.teacher[k] = k == 0 ? 0.0 : ep.target[k - 1];
  }
  const int npd = cfg.neurons_per_dim;
  ep.spikes = Trace::Zero(cfg.n_steps * cfg.step_ms, cfg.n_in());
  for (int k = 0; k < cfg.n_steps; ++k)
    for (int m = 0; m < cfg.step_ms; ++m) {
      const Eigen::Index t = k * cfg.step_ms + m;
      for (int d = 0; d < dims; ++d)
        ep.spikes.row(t).segment(d * npd, npd) = encode_gaussian_tuning(ep.x(k, d), in_spec, rng).transpose();
      ep.spikes.row(t).segment(dims * npd, npd) = encode_gaussian_tuning(ep.teacher[k], teach_spec, rng).transpose();
    }
  return ep;
}

/// Per-step prediction: readout averaged over each step's window. With a
/// memoryless readout this is W_out times the window spike count / step_ms.
inline Vector l2l_predictions(const Trace& readout, int step_ms) {
  const Eigen::Index n = readout.rows() / step_ms;
  Vector pred(n);
  for (Eigen::Index k = 0; k < n; ++k) pred[k] = readout.col(0).segment(k * step_ms, step_ms).mean();
  return pred;
}

/// MSE over steps with its cotangent on the readout trace.
inline LossValue l2l_loss(const Trace& readout, const Vector& target, int step_ms) {
  const Vector pred = l2l_predictions(readout, step_ms);
  if (pred.size() != target.size()) throw ConfigError("l2l_loss: target length mismatch");
  const double n = static_cast<double>(target.size());
  LossValue out;
  const Vector diff = pred - target;
  out.value = diff.squaredNorm() / n;
  out.cotangent = Trace::Zero(readout.rows(), readout.cols());
  for (Eigen::Index k = 0; k < diff.size(); ++k)
    out.cotangent.col(0).segment(k * step_ms, step_ms).setConstant(2.0 * diff[k] / (n * step_ms));
  return out;
}

// ---------------------------------------------------------------------------
// Ridge baseline

/// Exponential-kernel spike traces (truncated at width_ms), averaged over each step.
inline Trace mean_spiking_trace(const Trace& raster, int step_ms, double tau_ms, int width_ms) {
  const Eigen::Index T = raster.rows(), n = raster.cols(), steps = T / step_ms;
  Trace trace = Trace::Zero(T, n);
  for (Eigen::Index t = 0; t < T; ++t)
    for (int s = 0; s < width_ms && s <= t; ++s) trace.row(t) += std::exp(-s / tau_ms) * raster.row(t - s);
  Trace mean(steps, n);
  for (Eigen::Index k = 0; k < steps; ++k) mean.row(k) = trace.middleRows(k * step_ms, step_ms).colwise().mean();
  return mean;
}

struct RidgeModel {
  Vector w;
  double bias = 0.0;

  double predict(const Eigen::RowVectorXd& x) const { return x.dot(w) + bias; }
};

/// Ridge regression with an unpenalized intercept (features centered).
inline RidgeModel ridge_fit(const Trace& X, const Vector& y, double reg) {
  if (X.rows() != y.size() || X.rows() < 1) throw ConfigError("ridge_fit: shape mismatch");
  if (reg <= 0.0 && X.rows() <= X.cols()) throw ConfigError("ridge_fit: underdetermined without regularization");
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const double ymu = y.mean();
  const Matrix Xc = X.rowwise() - mu;
  Matrix A = Xc.transpose() * Xc;
  A.diagonal().array() += reg;
  RidgeModel m;
  m.w = A.ldlt().solve(Xc.transpose() * (y.array() - ymu).matrix());
  m.bias = ymu - mu.dot(m.w);
  return m;
}

inline double ridge_mse(const RidgeModel& m, const Trace& X, const Vector& y) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < X.rows(); ++k) {
    const double e = m.predict(X.row(k)) - y[k];
    s += e * e;
  }
  return s / static_cast<double>(X.rows());
}

inline Trace select_rows(const Trace& X, const std::vector<int>& idx) {
  Trace out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(k) = X.row(idx[k]);
  return out;
}

inline Vector select_rows(const Vector& y, const std::vector<int>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out[k] = y[idx[k]];
  return out;
}

/// Random train/test split of step indices (both sorted).
inline std::pair<std::vector<int>, std::vector<int>> split_steps(int n, double train_fraction, std::mt19937_64& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const int n_train = std::clamp(static_cast<int>(std::lround(train_fraction * n)), 1, n - 1);
  std::vector<int> train(idx.begin(), idx.begin() + n_train), test(idx.begin() + n_train, idx.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

struct LinearBaseline {
  double test_mse = 0.0;
  std::vector<int> test_steps;
};

/// Batch protocol: fit on a random train_fraction of the steps, report MSE on the rest.
inline LinearBaseline linear_baseline(const Trace& traces, const Vector& targets, double reg, double train_fraction,
                                      std::mt19937_64& rng) {
  auto [train, test] = split_steps(static_cast<int>(targets.size()), train_fraction, rng);
  const auto model = ridge_fit(select_rows(traces, train), select_rows(targets, train), reg);
  return {ridge_mse(model, select_rows(traces, test), select_rows(targets, test)), test};
}

/// Online-prefix protocol: for each step k >= 1, fit on steps [0, k) and report
/// the squared error on step k. Entry k-1 of the result belongs to step k.
inline std::vector<double> linear_baseline_online(const Trace& traces, const Vector& targets, double reg) {
  if (reg <= 0.0) throw ConfigError("linear_baseline_online: reg must be > 0");
  std::vector<double> out;
  for (Eigen::Index k = 1; k < targets.size(); ++k) {
    const auto model = ridge_fit(traces.topRows(k), targets.head(k), reg);
    const double e = model.predict(traces.row(k)) - targets[k];
    out.push_back(e * e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feed-forward backprop baseline

struct FFBaselineConfig {
  int hidden = 10;
  double lr = 0.1;
  double beta1 = 0.7;
  double beta2 = 0.9;
  double weight_decay = 1e-5;
};

/// Online training of a d-hidden-1 network (sigmoid hidden, linear output) on
/// an example stream. Entry k is the squared error on example k before the
/// update that uses it.
inline std::vector<double> ff_backprop_baseline(const Trace& x, const Vector& y, const FFBaselineConfig& cfg,
                                                std::mt19937_64& rng) {
  const int d = static_cast<int>(x.cols()), h = cfg.hidden;
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix w1(h, d);
  Vector b1 = Vector::Zero(h), w2(h), b2 = Vector::Zero(1);
  const double s1 = std::sqrt(2.0 / (d + h)), s2 = std::sqrt(2.0 / (h + 1));
  for (Eigen::Index k = 0; k < w1.size(); ++k) w1.data()[k] = s1 * normal(rng);
  for (Eigen::Index k = 0; k < w2.size(); ++k) w2[k] = s2 * normal(rng);
  AdamConfig ac{cfg.beta1, cfg.beta2, 1e-8, true, cfg.weight_decay};
  Adam opt(ac);
  std::vector<double> curve;
  Matrix gw1(h, d);
  Vector gb1(h), gw2(h), gb2(1);
  for (Eigen::Index k = 0; k < x.rows(); ++k) {
    const Vector in = x.row(k).transpose();
    const Vector a = w1 * in + b1;
    const Vector hid = a.unaryExpr([](double v) { return sigmoid(v); });
    const double out = w2.dot(hid) + b2[0];
    const double e = out - y[k];
    curve.push_back(e * e);
    const double dout = 2.0 * e;
    gw2 = dout * hid;
    gb2[0] = dout;
    const Vector da = (dout * w2).cwiseProduct(hid.cwiseProduct((1.0 - hid.array()).matrix()));
    gw1 = da * in.transpose();
    gb1 = da;
    adam_step(opt,
              {{"w1", flat(w1), flat(gw1), {}},
               {"b1", flat(b1), flat(gb1), {}},
               {"w2", flat(w2), flat(gw2), {}},
               {"b2", flat(b2), flat(gb2), {}}},
              cfg.lr);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// L2L training and evaluation

inline TrainState make_l2l_state(const L2LConfig& cfg, const NetworkConfig& net, const TrainConfig& train,
                                 std::uint64_t seed) {
  cfg.validate();
  return make_train_state(net, train, cfg.n_in(), 1, seed);
}

/// Outer-loop training over freshly drawn tasks; one update per iteration.
inline void train_l2l_outer(const L2LConfig& cfg, const NetworkConfig& net, const TrainConfig& train, TrainState& s,
                            const TrainHooks& hooks = {}) {
  cfg.validate();
  train.validate();
  for (; s.iteration < train.iterations;) {
    std::vector<L2LEpisode> eps;
    std::vector<Trace> inputs;
    for (int b = 0; b < train.batch_size; ++b) {
      eps.push_back(build_l2l_episode(cfg, s.rng));
      inputs.push_back(eps.back().spikes);
    }
    const auto res = supervised_batch(
        s.params, inputs,
        [&](const SimTape& tape, std::size_t k) { return l2l_loss(tape.readout, eps[k].target, cfg.step_ms); }, train,
        s.rng);
    apply_gradients(s, res.grad, net, train);
    ++s.iteration;
    MetricRow row;
    row.iteration = s.iteration;
    row.loss = res.loss;
    row.mse = res.task;
    row.rate_reg = res.rate;
    if (hooks.metrics) hooks.metrics(row);
    if (hooks.log && s.iteration % train.log_every == 0)
      hooks.log("iter " + std::to_string(s.iteration) + " mse " + std::to_string(res.task) + " rate " +
                std::to_string(res.mean_rate_hz) + " Hz");
    if (hooks.checkpoint && train.checkpoint_every > 0 && s.iteration % train.checkpoint_every == 0)
      hooks.checkpoint(s);
  }
}

struct L2LEvaluation {
  std::vector<double> lsnn_mse;   // on each episode's held-out steps
  std::vector<double> ridge_mse;  // same steps
  std::vector<double> lsnn_full_mse;
  std::vector<L2LEpisode> episodes;
  std::vector<Trace> rasters;
  std::vector<Vector> predictions;

  int wins() const {
    int w = 0;
    for (std::size_t k = 0; k < lsnn_mse.size(); ++k) w += lsnn_mse[k] < ridge_mse[k] ? 1 : 0;
    return w;
  }
};

/// Held-out episodes: LSNN prediction error vs the ridge baseline fitted on
/// the same network's mean spiking traces.
inline L2LEvaluation evaluate_l2l(const L2LConfig& cfg, const NetworkParams& p, std::mt19937_64& rng) {
  L2LEvaluation ev;
  for (int e = 0; e < cfg.test_episodes; ++e) {
    auto ep = build_l2l_episode(cfg, rng);
    const auto r = simulate(p, ep.spikes, false, rng);
    const Vector pred = l2l_predictions(r.readout, cfg.step_ms);
    const Trace traces = mean_spiking_trace(r.raster, cfg.step_ms, cfg.trace_tau_ms, cfg.trace_width_ms);
    const auto base = linear_baseline(traces, ep.target, cfg.ridge_reg, cfg.ridge_train_fraction, rng);
    double mse = 0.0;
    for (int k : base.test_steps) mse += (pred[k] - ep.target[k]) * (pred[k] - ep.target[k]);
    ev.lsnn_mse.push_back(mse / static_cast<double>(base.test_steps.size()));
    ev.ridge_mse.push_back(base.test_mse);
    ev.lsnn_full_mse.push_back((pred - ep.target).squaredNorm() / static_cast<double>(pred.size()));
    ev.episodes.push_back(std::move(ep));
    ev.rasters.push_back(r.raster);
    ev.predictions.push_back(pred);
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Delayed-cue memory task

/// Cue A or B (one input group each) is shown, followed by a silent delay and a
/// recall cue; the class is read from the readout averaged over the recall period.
struct DelayedCueConfig {
  int n_per_group = 10;
  double cue_rate_hz = 100.0;
  int cue_ms = 100;
  int delay_ms = 600;
  int recall_ms = 50;
  double recall_rate_hz = 100.0;
  int test_trials = 200;

  int n_in() const { return 3 * n_per_group; }
  int steps() const { return cue_ms + delay_ms + recall_ms; }

  void validate() const {
    if (n_per_group < 1) throw ConfigError("cue.n_per_group must be >= 1");
    if (cue_ms < 1 || delay_ms < 0 || recall_ms < 1) throw ConfigError("cue: durations invalid");
    if (!(cue_rate_hz > 0.0 && recall_rate_hz > 0.0)) throw ConfigError("cue: rates must be > 0");
    if (test_trials < 1) throw ConfigError("cue.test_trials must be >= 1");
  }
};

inline Trace delayed_cue_input(const DelayedCueConfig& cfg, int label, std::mt19937_64& rng) {
  const int g = cfg.n_per_group;
  Trace x = Trace::Zero(cfg.steps(), cfg.n_in());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double p_cue = cfg.cue_rate_hz / 1000.0, p_recall = cfg.recall_rate_hz / 1000.0;
  for (int t = 0; t < cfg.cue_ms; ++t)
    for (int i = 0; i < g; ++i) x(t, label * g + i) = u(rng) < p_cue ? 1.0 : 0.0;
  for (int t = cfg.cue_ms + cfg.delay_ms; t < cfg.steps(); ++t)
    for (int i = 0; i < g; ++i) x(t, 2 * g + i) = u(rng) < p_recall ? 1.0 : 0.0;
  return x;
}

inline double classification_accuracy(const NetworkParams& p, const std::vector<Trace>& inputs,
                                       const std::vector<int>& labels, int window, std::mt19937_64& rng) {
  int correct = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    correct += predict_class(simulate(p, inputs[k], false, rng).readout, window) == labels[k] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

inline void train_delayed_cue(const DelayedCueConfig& cfg, const NetworkConfig& net, const TrainConfig& train,
                              TrainState& s, const TrainHooks& hooks = {}) {
  cfg.validate();
  train.validate();
  std::bernoulli_distribution coin(0.5);
  for (; s.iteration < train.iterations;) {
    std::vector<Trace> inputs;
    std::vector<int> labels;
    for (int b = 0; b < train.batch_size; ++b) {
      labels.push_back(coin(s.rng) ? 1 : 0);
      inputs.push_back(delayed_cue_input(cfg, labels.back(), s.rng));
    }
    const auto res = supervised_batch(
        s.params, inputs,
        [&](const SimTape& tape, std::size_t k) {
          return loss_crossentropy_avg(tape.readout, cfg.recall_ms, labels[k]);
        },
        train, s.rng);
    int correct = 0;
    for (std::size_t k = 0; k < labels.size(); ++k)
      correct += predict_class(res.readouts[k], cfg.recall_ms) == labels[k] ? 1 : 0;
    apply_gradients(s, res.grad, net, train);
    ++s.iteration;
    MetricRow row;
    row.iteration = s.iteration;
    row.loss = res.loss;
    row.rate_reg = res.rate;
    row.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    if (hooks.metrics) hooks.metrics(row);
    if (hooks.log && s.iteration % train.log_every == 0)
      hooks.log("iter " + std::to_string(s.iteration) + " loss " + std::to_string(res.task) + " batch acc " +
                std::to_string(row.accuracy) + " rate " + std::to_string(res.mean_rate_hz) + " Hz");
    if (hooks.checkpoint && train.checkpoint_every > 0 && s.iteration % train.checkpoint_every == 0)
      hooks.checkpoint(s);
  }
}

inline double test_delayed_cue(const DelayedCueConfig& cfg, const NetworkParams& p, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<Trace> inputs;
  std::vector<int> labels;
  for (int k = 0; k < cfg.test_trials; ++k) {
    labels.push_back(coin(rng) ? 1 : 0);
    inputs.push_back(delayed_cue_input(cfg, labels.back(), rng));
  }
  return classification_accuracy(p, inputs, labels, cfg.recall_ms, rng);
}

// ---------------------------------------------------------------------------
// Sequential pixel classification

struct SeqPixelConfig {
  DatasetSource train_data{"data/mnist_5k.csv.gz", "csv", "", 255.0};
  DatasetSource test_data{"", "csv", "", 255.0};  // empty path: split off the training file
  int n_train = 4000;
  int n_test = 1000;
  int downsample = 2;
  std::string encoding = "threshold";  // threshold | rate
  int n_thresholds = 40;
  int n_rate_neurons = 80;
  int pixel_ms = 1;
  int readout_window = 56;
  bool cue_neuron = true;
  int eval_every = 0;     // iterations between test evaluations (0: end only)
  int eval_subset = 0;    // test images used by intermediate evaluations (0: all)

  int input_neurons() const { return encoding == "threshold" ? 2 * n_thresholds : n_rate_neurons; }
  int n_in() const { return input_neurons() + (cue_neuron ? 1 : 0); }

  void validate() const {
    if (encoding != "threshold" && encoding != "rate") throw ConfigError("pixels.encoding must be 'threshold' or 'rate'");
    if (n_train < 1 || n_test < 1) throw ConfigError("pixels: n_train and n_test must be >= 1");
    if (downsample < 1) throw ConfigError("pixels.downsample must be >= 1");
    if (n_thresholds < 1 || n_rate_neurons < 1) throw ConfigError("pixels: encoder size must be >= 1");
    if (pixel_ms < 1) throw ConfigError("pixels.pixel_ms must be >= 1");
    if (readout_window < 1) throw ConfigError("pixels.readout_window must be >= 1");
    if (eval_every < 0 || eval_subset < 0) throw ConfigError("pixels: eval settings must be >= 0");
  }
};

/// Pixels in raster order, pixel_ms steps each, followed by the readout window
/// during which the cue neuron (last input) fires every step.
inline Trace encode_pixel_sequence(const Eigen::Ref<const Eigen::RowVectorXd>& pixels, const SeqPixelConfig& cfg,
                                   std::mt19937_64& rng) {
  const int n_pix = static_cast<int>(pixels.size());
  const int T = n_pix * cfg.pixel_ms + cfg.readout_window;
  Trace x = Trace::Zero(T, cfg.n_in());
  const ThresholdCodeSpec spec{cfg.n_thresholds};
  double prev = 0.0;
  for (int k = 0; k < n_pix; ++k) {
    const double cur = pixels[k];
    for (int m = 0; m < cfg.pixel_ms; ++m) {
      const int t = k * cfg.pixel_ms + m;
      if (cfg.encoding == "threshold") {
        if (m == 0) x.row(t).head(spec.n_neurons()) = encode_threshold_crossing(prev, cur, spec).transpose();
      } else {
        x.row(t).head(cfg.n_rate_neurons) = encode_population_rate(cur, cfg.n_rate_neurons, rng).transpose();
      }
    }
    prev = cur;
  }
  if (cfg.cue_neuron)
    for (int t = n_pix * cfg.pixel_ms; t < T; ++t) x(t, cfg.n_in() - 1) = 1.0;
  return x;
}

struct PixelData {
  Dataset train;
  Dataset test;
};

/// Loads, downsamples and splits the data. Without a separate test file the
/// training file is shuffled with `seed` and split.
inline PixelData load_pixel_data(const SeqPixelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset all = downsample(load_dataset(cfg.train_data), cfg.downsample);
  PixelData out;
  if (cfg.test_data.path.empty()) {
    if (cfg.n_train + cfg.n_test > all.size())
      throw ConfigError("pixels: n_train + n_test exceeds the " + std::to_string(all.size()) + " available images");
    std::vector<int> idx(all.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    out.train = subset(all, {idx.begin(), idx.begin() + cfg.n_train});
    out.test = subset(all, {idx.begin() + cfg.n_train, idx.begin() + cfg.n_train + cfg.n_test});
  } else {
    Dataset test = downsample(load_dataset(cfg.test_data), cfg.downsample);
    std::vector<int> a(std::min(cfg.n_train, all.size())), b(std::min(cfg.n_test, test.size()));
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 0);
    out.train = subset(all, a);
    out.test = subset(test, b);
  }
  return out;
}

inline double seq_pixel_accuracy(const SeqPixelConfig& cfg, const NetworkParams& p, const Dataset& data, int limit,
                                 std::mt19937_64& rng) {
  const int n = limit > 0 ? std::min(limit, data.size()) : data.size();
  int correct = 0;
  for (int k = 0; k < n; ++k) {
    const Trace x = encode_pixel_sequence(data.images.row(k), cfg, rng);
    correct += predict_class(simulate(p, x, false, rng).readout, cfg.readout_window) == data.labels[k] ? 1 : 0;
  }
  return static_cast<double>(correct) / n;
}

inline void train_seq_pixel(const SeqPixelConfig& cfg, const NetworkConfig& net, const TrainConfig& train,
                            const PixelData& data, TrainState& s, const TrainHooks& hooks = {}) {
  cfg.validate();
  train.validate();
  std::uniform_int_distribution<int> pick(0, data.train.size() - 1);
  for (; s.iteration < train.iterations;) {
    std::vector<Trace> inputs;
    std::vector<int> labels;
    for (int b = 0; b < train.batch_size; ++b) {
      const int k = pick(s.rng);
      inputs.push_back(encode_pixel_sequence(data.train.images.row(k), cfg, s.rng));
      labels.push_back(data.train.labels[k]);
    }
    const auto res = supervised_batch(
        s.params, inputs,
        [&](const SimTape& tape, std::size_t k) {
          return loss_crossentropy_avg(tape.readout, cfg.readout_window, labels[k]);
        },
        train, s.rng);
    int correct = 0;
    for (std::size_t k = 0; k < labels.size(); ++k)
      correct += predict_class(res.readouts[k], cfg.readout_window) == labels[k] ? 1 : 0;
    const auto stats = apply_gradients(s, res.grad, net, train);
    ++s.iteration;
    MetricRow row;
    row.iteration = s.iteration;
    row.loss = res.loss;
    row.rate_reg = res.rate;
    row.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    if (cfg.eval_every > 0 && s.iteration % cfg.eval_every == 0) {
      std::mt19937_64 eval_rng(static_cast<std::uint64_t>(s.iteration));
      row.accuracy = seq_pixel_accuracy(cfg, s.params, data.test, cfg.eval_subset, eval_rng);
      if (hooks.log) hooks.log("iter " + std::to_string(s.iteration) + " test accuracy " + std::to_string(row.accuracy));
    }
    if (hooks.metrics) hooks.metrics(row);
    if (hooks.log && s.iteration % train.log_every == 0)
      hooks.log("iter " + std::to_string(s.iteration) + " loss " + std::to_string(res.task) + " batch acc " +
                std::to_string(static_cast<double>(correct) / labels.size()) + " rate " +
                std::to_string(res.mean_rate_hz) + " Hz rewired " + std::to_string(stats.dormant));
    if (hooks.checkpoint && train.checkpoint_every > 0 && s.iteration % train.checkpoint_every == 0)
      hooks.checkpoint(s);
  }
}

}  // namespace lsnn
