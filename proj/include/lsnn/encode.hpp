#pragma once

// Observation encoders producing one input vector per time step.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>

#include "lsnn/errors.hpp"
#include "lsnn/snn_core.hpp"

namespace lsnn {

/// Each of `n` neurons spikes with probability `gray`.
inline Vector encode_population_rate(double gray, int n, std::mt19937_64& rng) {
  if (gray < 0.0 || gray > 1.0) {
    std::cerr << "warning: grey value " << gray << " clamped to [0, 1]\n";
    gray = std::clamp(gray, 0.0, 1.0);
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector z(n);
  for (int i = 0; i < n; ++i) z[i] = u(rng) < gray ? 1.0 : 0.0;
  return z;
}

/// Levels (k+1)/(n+1), k < n. Neuron k fires on upward crossings of level k,
/// neuron n+k on downward crossings.
struct ThresholdCodeSpec {
  int n_thresholds = 40;

  int n_neurons() const { return 2 * n_thresholds; }
  double level(int k) const { return static_cast<double>(k + 1) / (n_thresholds + 1); }
};

inline Vector encode_threshold_crossing(double prev, double cur, const ThresholdCodeSpec& spec) {
  Vector z = Vector::Zero(spec.n_neurons());
  for (int k = 0; k < spec.n_thresholds; ++k) {
    const double th = spec.level(k);
    if (prev < th && th <= cur) z[k] = 1.0;
    if (cur <= th && th < prev) z[spec.n_thresholds + k] = 1.0;
  }
  return z;
}

/// Gaussian tuning curves r_i = r_max exp(-width_coeff (m_i - value)^2), with
/// centers m_i evenly spaced over [lo, hi].
struct TuningCurveSpec {
  int n_neurons = 100;
  double lo = -1.0;
  double hi = 1.0;
  double width_coeff = 100.0;
  double r_max_hz = 200.0;
  double dt_ms = 1.0;

  /// r_max exp(-(m - z)^2 / (2 sigma^2)) with sigma = (hi - lo) * sigma_fraction.
  static TuningCurveSpec regression(double lo, double hi, int n = 100, double r_max_hz = 200.0,
                                    double sigma_fraction = 1e-3) {
    const double sigma = (hi - lo) * sigma_fraction;
    return {n, lo, hi, 1.0 / (2.0 * sigma * sigma), r_max_hz, 1.0};
  }

  /// r_max exp(-100 (xi_i - xi)^2) over [-1, 1].
  static TuningCurveSpec arena(int n = 40, double r_max_hz = 500.0) { return {n, -1.0, 1.0, 100.0, r_max_hz, 1.0}; }

  double center(int i) const { return n_neurons == 1 ? lo : lo + (hi - lo) * i / (n_neurons - 1); }

  void validate() const {
    if (n_neurons < 1) throw ConfigError("tuning: n_neurons must be >= 1");
    if (!(hi > lo) && n_neurons > 1) throw ConfigError("tuning: hi must exceed lo");
    if (!(width_coeff > 0.0)) throw ConfigError("tuning: width coefficient must be > 0");
    if (!(r_max_hz >= 0.0) || !(dt_ms > 0.0)) throw ConfigError("tuning: r_max must be >= 0 and dt > 0");
  }
};

/// Analytic rates in Hz.
inline Vector tuning_rates(double value, const TuningCurveSpec& spec) {
  value = std::clamp(value, std::min(spec.lo, spec.hi), std::max(spec.lo, spec.hi));
  Vector r(spec.n_neurons);
  for (int i = 0; i < spec.n_neurons; ++i) {
    const double d = spec.center(i) - value;
    r[i] = spec.r_max_hz * std::exp(-spec.width_coeff * d * d);
  }
  return r;
}

/// Per-step Bernoulli spikes with probability min(1, rate * dt).
inline Vector encode_gaussian_tuning(double value, const TuningCurveSpec& spec, std::mt19937_64& rng) {
  const Vector r = tuning_rates(value, spec);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector z(spec.n_neurons);
  for (int i = 0; i < spec.n_neurons; ++i) z[i] = u(rng) < std::min(1.0, r[i] * spec.dt_ms / 1000.0) ? 1.0 : 0.0;
  return z;
}

/// Two groups of `group` neurons: the first fires on a positive reward, the
/// second on a negative one.
inline Vector encode_reward_pulse(double reward, int group = 40) {
  Vector z = Vector::Zero(2 * group);
  if (reward > 0.0) z.head(group).setOnes();
  if (reward < 0.0) z.tail(group).setOnes();
  return z;
}

/// Continuous inputs are used as x(t) directly; each frame is held for
/// `repeat` consecutive steps.
inline Trace analog_channel(const Trace& frames, int repeat = 1) {
  if (repeat < 1) throw ConfigError("analog_channel: repeat must be >= 1");
  Trace out(frames.rows() * repeat, frames.cols());
  for (Eigen::Index f = 0; f < frames.rows(); ++f)
    for (int r = 0; r < repeat; ++r) out.row(f * repeat + r) = frames.row(f);
  return out;
}

}  // namespace lsnn
