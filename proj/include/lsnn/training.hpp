#pragma once

// Network construction from a configuration and the pieces shared by every
// training loop: training state, batched supervised gradients, parameter
// updates and metric reporting.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lsnn/errors.hpp"
#include "lsnn/grad_engine.hpp"
#include "lsnn/init_rewire.hpp"
#include "lsnn/optim.hpp"
#include "lsnn/snn_core.hpp"

namespace lsnn {

/// Neurons are ordered [regular excitatory | regular inhibitory | adaptive].
/// Adaptive neurons are excitatory.
struct NetworkConfig {
  int n_regular = 64;
  int n_adaptive = 32;
  int n_inhibitory = 0;  // taken from the regular population; only used with Dale init
  double tau_m = 20.0;
  double tau_m_max = 0.0;  // > tau_m: sample uniformly in [tau_m, tau_m_max]
  double tau_a = 700.0;
  double tau_a_max = 0.0;  // > tau_a: sample uniformly in [tau_a, tau_a_max]
  double beta = 1.8;
  double b0 = 0.01;
  double refractory = 2.0;
  double dt = 1.0;
  double tau_out = 20.0;  // < 0 means pure accumulator
  int delay_in_min = 1;
  int delay_in_max = 1;
  int delay_rec_min = 1;
  int delay_rec_max = 1;
  std::string init = "gaussian";  // gaussian | dale
  double w0 = 1.0;
  double input_frac_excitatory = 0.75;
  double connectivity = 1.0;
  bool rewire = false;
  std::string rewire_budget = "global";  // global | per_matrix
  double l1 = 0.01;
  double temperature = 0.0;
  double noise_sigma = 0.0;  // > 0 enables learnable current noise
  double readout_scale = 1.0;  // extra factor on the initial W_out

  int n_rec() const { return n_regular + n_adaptive; }

  void validate() const {
    std::vector<std::string> bad;
    if (n_regular < 0 || n_adaptive < 0 || n_rec() < 1) bad.push_back("network: need at least one neuron");
    if (n_inhibitory < 0 || n_inhibitory > n_regular) bad.push_back("network.n_inhibitory must be in [0, n_regular]");
    if (!(tau_m > 0.0)) bad.push_back("network.tau_m must be > 0");
    if (!(tau_a > 0.0)) bad.push_back("network.tau_a must be > 0");
    if (!(beta >= 0.0)) bad.push_back("network.beta must be >= 0");
    if (!(b0 > 0.0)) bad.push_back("network.b0 must be > 0");
    if (!(refractory >= 0.0)) bad.push_back("network.refractory must be >= 0");
    if (!(dt > 0.0)) bad.push_back("network.dt must be > 0");
    if (delay_in_min < 0 || delay_in_max < delay_in_min) bad.push_back("network.delay_in range invalid");
    if (delay_rec_min < 1 || delay_rec_max < delay_rec_min) bad.push_back("network.delay_rec range must be >= 1");
    if (init != "gaussian" && init != "dale") bad.push_back("network.init must be 'gaussian' or 'dale'");
    if (!(w0 > 0.0)) bad.push_back("network.w0 must be > 0");
    if (!(input_frac_excitatory >= 0.0 && input_frac_excitatory <= 1.0))
      bad.push_back("network.input_frac_excitatory must be in [0, 1]");
    if (!(connectivity > 0.0 && connectivity <= 1.0)) bad.push_back("network.connectivity must be in (0, 1]");
    if (rewire_budget != "global" && rewire_budget != "per_matrix")
      bad.push_back("network.rewire_budget must be 'global' or 'per_matrix'");
    if (l1 < 0.0) bad.push_back("network.l1 must be >= 0");
    if (temperature < 0.0) bad.push_back("network.temperature must be >= 0");
    if (noise_sigma < 0.0) bad.push_back("network.noise_sigma must be >= 0");
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      throw ConfigError(msg);
    }
  }

  RewireConfig rewire_config() const {
    RewireConfig r;
    r.l1_coeff = l1;
    r.temperature = temperature;
    r.target_connectivity = connectivity;
    r.budget = rewire_budget == "global" ? RewireBudget::global : RewireBudget::per_matrix;
    return r;
  }
};

/// Builds and initializes a network. Masks are drawn first, then weights.
inline NetworkParams build_network(const NetworkConfig& cfg, int n_in, int n_out, std::mt19937_64& rng) {
  cfg.validate();
  if (n_in < 1 || n_out < 1) throw ConfigError("build_network: n_in and n_out must be >= 1");
  const int n = cfg.n_rec();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<NeuronParams> neurons(n);
  for (int j = 0; j < n; ++j) {
    auto& np = neurons[j];
    np.tau_m = cfg.tau_m_max > cfg.tau_m ? cfg.tau_m + (cfg.tau_m_max - cfg.tau_m) * u(rng) : cfg.tau_m;
    np.b0 = cfg.b0;
    np.refractory = cfg.refractory;
    if (j >= cfg.n_regular) {
      np.beta = cfg.beta;
      np.tau_a = cfg.tau_a_max > cfg.tau_a ? cfg.tau_a + (cfg.tau_a_max - cfg.tau_a) * u(rng) : cfg.tau_a;
    } else {
      np.beta = 0.0;
      np.tau_a = cfg.tau_a;
    }
  }
  auto p = make_network(n_in, n, n_out, neurons);
  p.dt = cfg.dt;
  p.tau_out = cfg.tau_out < 0.0 ? std::numeric_limits<double>::infinity() : cfg.tau_out;

  std::uniform_int_distribution<int> din(cfg.delay_in_min, cfg.delay_in_max);
  std::uniform_int_distribution<int> drec(cfg.delay_rec_min, cfg.delay_rec_max);
  for (Eigen::Index k = 0; k < p.delay_in.size(); ++k) p.delay_in.data()[k] = din(rng);
  for (Eigen::Index k = 0; k < p.delay_rec.size(); ++k) p.delay_rec.data()[k] = drec(rng);

  if (cfg.connectivity < 1.0) {
    p.mask_in = sparse_mask(n, n_in, cfg.connectivity, rng);
    p.mask_rec = sparse_mask(n, n, cfg.connectivity, rng, true);
    p.mask_out = sparse_mask(n_out, n, cfg.connectivity, rng);
  }

  if (cfg.init == "dale") {
    const int n_exc_regular = cfg.n_regular - cfg.n_inhibitory;
    Vector signs(n);
    for (int j = 0; j < n; ++j) signs[j] = (j >= n_exc_regular && j < cfg.n_regular) ? -1.0 : 1.0;
    p.rec_signs = signs;
    p.in_signs = draw_signs(n_in, cfg.input_frac_excitatory, rng);
    p.w_in = init_dale(n, n_in, *p.in_signs, cfg.w0, rng, &p.mask_in);
    p.w_rec = init_dale(n, n, signs, cfg.w0, rng, &p.mask_rec);
    p.w_out = init_dale(n_out, n, signs, cfg.w0 * cfg.readout_scale, rng, &p.mask_out);
  } else {
    p.w_in = init_gaussian(n, n_in, cfg.w0, rng);
    p.w_rec = init_gaussian(n, n, cfg.w0, rng);
    p.w_out = init_gaussian(n_out, n, cfg.w0 * cfg.readout_scale, rng);
  }
  p.apply_masks();
  if (cfg.noise_sigma > 0.0) p.noise_sigma = Vector::Constant(n, cfg.noise_sigma);
  p.validate();
  return p;
}

struct TrainConfig {
  int iterations = 100;
  int batch_size = 16;
  double lr = 0.01;
  double lr_decay = 1.0;
  int lr_interval = 1000000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool amsgrad = false;
  double gamma = 0.3;
  bool reset_gradient = true;
  double rate_target_hz = 10.0;
  double rate_coeff = 0.0;
  std::string rate_unit = "per_ms";  // per_ms | hertz
  int log_every = 10;
  int checkpoint_every = 0;  // 0: only at the end

  void validate() const {
    std::vector<std::string> bad;
    if (iterations < 0) bad.push_back("train.iterations must be >= 0");
    if (batch_size < 1) bad.push_back("train.batch_size must be >= 1");
    if (!(lr >= 0.0)) bad.push_back("train.lr must be >= 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) bad.push_back("train.lr_decay must be in (0, 1]");
    if (lr_interval < 1) bad.push_back("train.lr_interval must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) bad.push_back("train.adam_beta1 must be in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) bad.push_back("train.adam_beta2 must be in [0, 1)");
    if (!(adam_eps > 0.0)) bad.push_back("train.adam_eps must be > 0");
    if (!(gamma >= 0.0)) bad.push_back("train.gamma must be >= 0");
    if (!(rate_target_hz >= 0.0)) bad.push_back("train.rate_target_hz must be >= 0");
    if (!(rate_coeff >= 0.0)) bad.push_back("train.rate_coeff must be >= 0");
    if (rate_unit != "per_ms" && rate_unit != "hertz") bad.push_back("train.rate_unit must be 'per_ms' or 'hertz'");
    if (log_every < 1) bad.push_back("train.log_every must be >= 1");
    if (checkpoint_every < 0) bad.push_back("train.checkpoint_every must be >= 0");
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      throw ConfigError(msg);
    }
  }

  AdamConfig adam() const { return {adam_beta1, adam_beta2, adam_eps, amsgrad, 0.0}; }
  LrSchedule schedule() const { return {lr, lr_decay, lr_interval}; }
  RateUnit unit() const { return rate_unit == "hertz" ? RateUnit::hertz : RateUnit::per_ms; }
  BackwardOptions backward_options(bool noise = false) const {
    BackwardOptions o;
    o.gamma = gamma;
    o.reset_gradient = reset_gradient;
    o.noise_gradient = noise;
    return o;
  }
};

/// Everything a training loop mutates; checkpointed as a unit.
struct TrainState {
  NetworkParams params;
  Adam adam;
  std::optional<SynapseSigns> signs;
  long iteration = 0;
  std::mt19937_64 rng;
};

inline TrainState make_train_state(const NetworkConfig& net, const TrainConfig& train, int n_in, int n_out,
                                   std::uint64_t seed) {
  TrainState s{NetworkParams{}, Adam(train.adam()), std::nullopt, 0, std::mt19937_64(seed)};
  s.params = build_network(net, n_in, n_out, s.rng);
  if (net.rewire) s.signs = synapse_signs(s.params, s.rng);
  return s;
}

/// One optimizer step on the state, with DEEP R when the network rewires.
inline RewireStats apply_gradients(TrainState& s, const Gradients& g, const NetworkConfig& net, const TrainConfig& train,
                                   bool train_noise = false) {
  const double lr = lr_at(train.schedule(), s.iteration);
  const RewireConfig rc = net.rewire_config();
  return update_network(s.params, g, lr, s.adam, net.rewire ? &rc : nullptr, s.signs ? &*s.signs : nullptr, s.rng,
                        train_noise);
}

/// One row of the supervised metrics file; NaN marks a column not measured.
struct MetricRow {
  long iteration = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double mse = std::numeric_limits<double>::quiet_NaN();
  double rate_reg = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Callbacks a training loop reports to. All optional.
struct TrainHooks {
  std::function<void(const MetricRow&)> metrics;
  std::function<void(const TrainState&)> checkpoint;
  std::function<void(const std::string&)> log;
};

/// Task loss of one episode with its cotangent on the readout trace.
using EpisodeLoss = std::function<LossValue(const SimTape& tape, std::size_t episode)>;

struct BatchResult {
  double loss = 0.0;  // mean task loss + rate_coeff * pooled rate regularizer
  double task = 0.0;
  double rate = 0.0;
  double mean_rate_hz = 0.0;
  Gradients grad;
  std::vector<Trace> readouts;
  std::vector<Trace> rasters;
};

/// Simulates every episode, then backpropagates mean task loss plus the rate
/// regularizer pooled over the batch.
inline BatchResult supervised_batch(const NetworkParams& p, const std::vector<Trace>& inputs, const EpisodeLoss& loss,
                                    const TrainConfig& train, std::mt19937_64& rng, bool keep_rasters = false) {
  if (inputs.empty()) throw ConfigError("supervised_batch: empty batch");
  const double B = static_cast<double>(inputs.size());
  std::vector<SimTape> tapes;
  tapes.reserve(inputs.size());
  for (const auto& x : inputs) tapes.push_back(*simulate(p, x, true, rng).tape);

  std::vector<const Trace*> rasters;
  for (const auto& t : tapes) rasters.push_back(&t.spikes);
  const auto reg = firing_rate_regularizer(rasters, train.rate_target_hz, p.dt, train.unit());
  const auto hz = firing_rate_regularizer(rasters, 0.0, p.dt, RateUnit::hertz);

  BatchResult out;
  out.grad = Gradients::zeros_like(p);
  out.rate = reg.value;
  out.mean_rate_hz = hz.rates.mean();
  const auto opt = train.backward_options();
  for (std::size_t k = 0; k < tapes.size(); ++k) {
    const LossValue lv = loss(tapes[k], k);
    out.task += lv.value / B;
    Cotangents cot;
    cot.readout = lv.cotangent / B;
    if (train.rate_coeff > 0.0) cot.spikes = train.rate_coeff * reg.cotangents[k];
    out.grad += backward(tapes[k], p, cot, opt);
    out.readouts.push_back(tapes[k].readout);
    if (keep_rasters) out.rasters.push_back(tapes[k].spikes);
  }
  out.loss = out.task + train.rate_coeff * out.rate;
  return out;
}

}  // namespace lsnn
