#pragma once

// Backpropagation through time for the network in snn_core.hpp.
//
// The spike nonlinearity z = H(V - A) is differentiated with the dampened
// pseudo-derivative psi = gamma * max(0, 1 - |v|), v = (V - A) / A, so
//   dz/dV = psi / A,   dz/dA = -psi * V / A^2.
// The reset term -A_{t-1} z_{t-1} and the adaptation recurrence are
// differentiated exactly.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "lsnn/snn_core.hpp"

namespace lsnn {

inline double pseudo_derivative(double v_norm, double gamma) {
  return gamma * std::max(0.0, 1.0 - std::abs(v_norm));
}

/// External cotangents of the loss with respect to the recorded traces. Any
/// member may be left empty, meaning zero.
struct Cotangents {
  Trace readout;  // dL/dy_t, T x n_out
  Trace spikes;   // dL/dz_t, T x n_rec (direct terms only, e.g. rate regularizers)
  Trace voltage;  // dL/dV_t, T x n_rec
};

struct BackwardOptions {
  double gamma = 0.3;
  bool reset_gradient = true;   // differentiate the -A z reset term
  bool noise_gradient = false;  // produce dL/dnoise_sigma
  bool keep_adaptation_adjoint = false;
};

struct Gradients {
  Matrix w_in;
  Matrix w_rec;
  Matrix w_out;
  Vector noise_sigma;
  Trace adaptation_adjoint;  // dL/db_t, only when requested

  static Gradients zeros_like(const NetworkParams& p) {
    Gradients g;
    g.w_in = Matrix::Zero(p.w_in.rows(), p.w_in.cols());
    g.w_rec = Matrix::Zero(p.w_rec.rows(), p.w_rec.cols());
    g.w_out = Matrix::Zero(p.w_out.rows(), p.w_out.cols());
    g.noise_sigma = Vector::Zero(p.noise_sigma.size());
    return g;
  }

  Gradients& operator+=(const Gradients& o) {
    w_in += o.w_in;
    w_rec += o.w_rec;
    w_out += o.w_out;
    if (noise_sigma.size() == o.noise_sigma.size()) noise_sigma += o.noise_sigma;
    return *this;
  }

  Gradients& operator*=(double s) {
    w_in *= s;
    w_rec *= s;
    w_out *= s;
    noise_sigma *= s;
    return *this;
  }

  /// Name of the first parameter holding a non-finite entry, or empty.
  std::string first_non_finite() const {
    if (!w_in.allFinite()) return "w_in";
    if (!w_rec.allFinite()) return "w_rec";
    if (!w_out.allFinite()) return "w_out";
    if (!noise_sigma.allFinite()) return "noise_sigma";
    return {};
  }
};

/// Mean of a list of gradients, folded in index order.
inline Gradients mean_gradients(const std::vector<Gradients>& parts) {
  if (parts.empty()) throw ConfigError("mean_gradients: empty batch");
  Gradients total = parts.front();
  total.adaptation_adjoint.resize(0, 0);
  for (std::size_t k = 1; k < parts.size(); ++k) total += parts[k];
  total *= 1.0 / static_cast<double>(parts.size());
  return total;
}

namespace detail {

inline void check_cotangent(const Trace& c, int T, int cols, const char* name) {
  if (c.size() != 0 && (c.rows() != T || c.cols() != cols))
    throw ConfigError(std::string("backward: cotangent '") + name + "' has the wrong shape");
}

}  // namespace detail

/// Reverse-mode pass over a recorded tape.
inline Gradients backward(const SimTape& tape, const NetworkParams& p, const Cotangents& cot,
                          const BackwardOptions& opt = {}) {
  const int T = tape.steps;
  const int n = p.n_rec();
  const int n_in = p.n_in();
  if (T < 1 || tape.voltage.rows() != T) throw ConfigError("backward: incomplete tape");
  detail::check_cotangent(cot.readout, T, p.n_out(), "readout");
  detail::check_cotangent(cot.spikes, T, n, "spikes");
  detail::check_cotangent(cot.voltage, T, n, "voltage");

  const auto c = detail::neuron_constants(p);
  const double kappa = p.readout_decay();
  const int rec_depth = (p.delay_rec.size() > 0 ? p.delay_rec.maxCoeff() : 1) + 1;
  const bool uniform_rec = p.delay_rec.size() > 0 && p.delay_rec.minCoeff() == p.delay_rec.maxCoeff();
  const bool uniform_in = p.delay_in.size() > 0 && p.delay_in.minCoeff() == p.delay_in.maxCoeff();

  Gradients g = Gradients::zeros_like(p);
  if (opt.keep_adaptation_adjoint) g.adaptation_adjoint = Trace::Zero(T, n);
  Trace ibar = Trace::Zero(T, n);
  Trace pending = Trace::Zero(rec_depth, n);
  Vector vbar_next = Vector::Zero(n), bbar_next = Vector::Zero(n), abar_next = Vector::Zero(n);
  Vector vbar(n), bbar(n), abar(n), zbar(n);
  Vector ybar = Vector::Zero(p.n_out());

  for (int t = T - 1; t >= 0; --t) {
    ybar *= kappa;
    if (cot.readout.size() != 0) ybar += cot.readout.row(t).transpose();
    zbar.noalias() = p.w_out.transpose() * ybar;
    for (int j = 0; j < n; ++j)
      if (tape.spikes(t, j) != 0.0) g.w_out.col(j) += ybar;
    if (cot.spikes.size() != 0) zbar += cot.spikes.row(t).transpose();
    zbar += pending.row(t % rec_depth).transpose();
    pending.row(t % rec_depth).setZero();

    for (int j = 0; j < n; ++j) {
      const auto& k = c[j];
      const double v = tape.voltage(t, j);
      const double a = tape.threshold(t, j);
      const double z = tape.spikes(t, j);
      bbar[j] = k.rho * bbar_next[j] + k.beta * abar_next[j];
      double zb = zbar[j] + (1.0 - k.rho) * bbar[j];
      double ab = 0.0;
      if (opt.reset_gradient) {
        zb -= a * vbar_next[j];
        ab = -z * vbar_next[j];
      }
      const double psi = tape.refractory(t, j) ? 0.0 : pseudo_derivative((v - a) / a, opt.gamma);
      ab += zb * psi * (-v / (a * a));
      double vb = k.alpha * vbar_next[j] + zb * psi / a;
      if (cot.voltage.size() != 0) vb += cot.voltage(t, j);
      vbar[j] = vb;
      abar[j] = ab;
      ibar(t, j) = k.gain * vb;
      if (!std::isfinite(vb) || !std::isfinite(ab)) {
        std::ostringstream os;
        os << "backward: non-finite gradient at step " << t << ", neuron " << j;
        throw DivergenceError(os.str(), t, j);
      }
    }
    if (opt.keep_adaptation_adjoint) g.adaptation_adjoint.row(t) = bbar.transpose();

    // Route the current cotangent back to the presynaptic spikes it came from.
    if (uniform_rec) {
      const int d = p.delay_rec(0, 0);
      if (t - d >= 0) pending.row((t - d) % rec_depth).noalias() += (p.w_rec.transpose() * ibar.row(t).transpose()).transpose();
    } else {
      for (int i = 0; i < n; ++i) {
        const double* w = p.w_rec.col(i).data();
        const int* d = p.delay_rec.col(i).data();
        for (int j = 0; j < n; ++j) {
          const int s = t - d[j];
          if (s >= 0) pending(s % rec_depth, i) += w[j] * ibar(t, j);
        }
      }
    }
    std::swap(vbar_next, vbar);
    std::swap(bbar_next, bbar);
    std::swap(abar_next, abar);
  }

  // Weight gradients: each presynaptic event at step s meets the current
  // cotangent at its arrival step s + d.
  for (int s = 0; s < T; ++s) {
    for (int i = 0; i < n_in; ++i) {
      const double x = tape.inputs(s, i);
      if (x == 0.0) continue;
      if (uniform_in) {
        const int t = s + p.delay_in(0, 0);
        if (t < T) g.w_in.col(i) += x * ibar.row(t).transpose();
      } else {
        for (int j = 0; j < n; ++j) {
          const int t = s + p.delay_in(j, i);
          if (t < T) g.w_in(j, i) += x * ibar(t, j);
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      if (tape.spikes(s, i) == 0.0) continue;
      if (uniform_rec) {
        const int t = s + p.delay_rec(0, 0);
        if (t < T) g.w_rec.col(i) += ibar.row(t).transpose();
      } else {
        for (int j = 0; j < n; ++j) {
          const int t = s + p.delay_rec(j, i);
          if (t < T) g.w_rec(j, i) += ibar(t, j);
        }
      }
    }
  }
  if (opt.noise_gradient && p.has_noise() && tape.noise.size() != 0)
    g.noise_sigma = (ibar.array() * tape.noise.array()).colwise().sum().transpose();

  if (const auto bad = g.first_non_finite(); !bad.empty())
    throw DivergenceError("backward: non-finite gradient in " + bad, -1, -1);
  return g;
}

/// Scalar loss together with its cotangent on the traced quantity.
struct LossValue {
  double value = 0.0;
  Trace cotangent;
};

/// Softmax cross-entropy of the readout averaged over the final `window` steps.
inline LossValue loss_crossentropy_avg(const Trace& readout, int window, int label) {
  const int T = static_cast<int>(readout.rows());
  const int k = static_cast<int>(readout.cols());
  if (window < 1 || window > T) throw ConfigError("loss_crossentropy_avg: window must be in [1, T]");
  if (label < 0 || label >= k) throw ConfigError("loss_crossentropy_avg: label out of range");
  const Eigen::RowVectorXd logits = readout.bottomRows(window).colwise().mean();
  const double m = logits.maxCoeff();
  const Eigen::RowVectorXd e = (logits.array() - m).exp().matrix();
  const double lse = m + std::log(e.sum());
  Eigen::RowVectorXd prob = e / e.sum();
  LossValue out;
  out.value = lse - logits[label];
  prob[label] -= 1.0;
  out.cotangent = Trace::Zero(T, k);
  out.cotangent.bottomRows(window).rowwise() = prob / static_cast<double>(window);
  return out;
}

/// Class with the largest window-averaged readout.
inline int predict_class(const Trace& readout, int window) {
  Eigen::Index best = 0;
  readout.bottomRows(window).colwise().mean().maxCoeff(&best);
  return static_cast<int>(best);
}

/// Mean squared error over all entries.
inline LossValue loss_mse(const Trace& prediction, const Trace& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
    throw ConfigError("loss_mse: shape mismatch");
  if (prediction.size() == 0) throw ConfigError("loss_mse: empty input");
  const double n = static_cast<double>(prediction.size());
  LossValue out;
  const Trace diff = prediction - target;
  out.value = diff.squaredNorm() / n;
  out.cotangent = (2.0 / n) * diff;
  return out;
}

enum class RateUnit { hertz, per_ms };

struct RateRegularizer {
  double value = 0.0;
  std::vector<Trace> cotangents;  // one per raster, dR/dz
  Vector rates;                   // per-neuron rate in the chosen unit
};

/// R = mean_j (rate_j - f0)^2 with rates pooled over every raster.
inline RateRegularizer firing_rate_regularizer(const std::vector<const Trace*>& rasters, double target_hz,
                                               double dt_ms, RateUnit unit = RateUnit::hertz) {
  if (rasters.empty() || rasters.front()->size() == 0)
    throw ConfigError("firing_rate_regularizer: empty raster");
  const Eigen::Index n = rasters.front()->cols();
  double steps = 0.0;
  Vector counts = Vector::Zero(n);
  for (const Trace* r : rasters) {
    if (r->cols() != n) throw ConfigError("firing_rate_regularizer: raster width mismatch");
    counts += r->colwise().sum().transpose();
    steps += static_cast<double>(r->rows());
  }
  const double scale = unit == RateUnit::hertz ? 1000.0 : 1.0;
  const double f0 = unit == RateUnit::hertz ? target_hz : target_hz / 1000.0;
  const double per_spike = scale / (steps * dt_ms);
  RateRegularizer out;
  out.rates = counts * per_spike;
  const Vector dev = out.rates.array() - f0;
  out.value = dev.squaredNorm() / static_cast<double>(n);
  const Eigen::RowVectorXd slope = (2.0 * per_spike / static_cast<double>(n)) * dev.transpose();
  for (const Trace* r : rasters) {
    Trace c(r->rows(), n);
    c.rowwise() = slope;
    out.cotangents.push_back(std::move(c));
  }
  return out;
}

inline RateRegularizer firing_rate_regularizer(const Trace& raster, double target_hz, double dt_ms,
                                               RateUnit unit = RateUnit::hertz) {
  return firing_rate_regularizer(std::vector<const Trace*>{&raster}, target_hz, dt_ms, unit);
}

enum class LossKind { cross_entropy_avg, mse, ppo_composite };

struct LossSpec {
  LossKind kind = LossKind::cross_entropy_avg;
  int window = 1;
  double rate_target_hz = 10.0;
  double rate_coeff = 0.0;
  RateUnit rate_unit = RateUnit::per_ms;

  void validate() const {
    if (window < 1) throw ConfigError("LossSpec: window must be >= 1");
    if (rate_target_hz < 0.0) throw ConfigError("LossSpec: rate target must be >= 0");
    if (rate_coeff < 0.0) throw ConfigError("LossSpec: rate coefficient must be >= 0");
  }
};

/// Supervised target: a class label (cross-entropy) or a readout target trace (MSE).
struct SupervisedTarget {
  int label = -1;
  Trace readout;
};

struct LossBreakdown {
  double total = 0.0;
  double task = 0.0;
  double rate = 0.0;
};

/// Loss value and cotangents for one recorded episode.
inline std::pair<LossBreakdown, Cotangents> supervised_cotangents(const SimTape& tape, const NetworkParams& p,
                                                                  const LossSpec& spec,
                                                                  const SupervisedTarget& target) {
  spec.validate();
  LossBreakdown loss;
  Cotangents cot;
  LossValue task;
  switch (spec.kind) {
    case LossKind::cross_entropy_avg:
      task = loss_crossentropy_avg(tape.readout, spec.window, target.label);
      break;
    case LossKind::mse:
      task = loss_mse(tape.readout, target.readout);
      break;
    case LossKind::ppo_composite:
      throw ConfigError("supervised_cotangents: the PPO loss is evaluated by the RL module");
  }
  loss.task = task.value;
  cot.readout = std::move(task.cotangent);
  if (spec.rate_coeff > 0.0) {
    auto reg = firing_rate_regularizer(tape.spikes, spec.rate_target_hz, p.dt, spec.rate_unit);
    loss.rate = reg.value;
    cot.spikes = spec.rate_coeff * reg.cotangents.front();
  }
  loss.total = loss.task + spec.rate_coeff * loss.rate;
  return {loss, std::move(cot)};
}

/// Loss and parameter gradients for one recorded episode.
inline std::pair<LossBreakdown, Gradients> loss_and_gradients(const SimTape& tape, const NetworkParams& p,
                                                              const LossSpec& spec,
                                                              const SupervisedTarget& target,
                                                              const BackwardOptions& opt = {}) {
  auto [loss, cot] = supervised_cotangents(tape, p, spec, target);
  return {loss, backward(tape, p, cot, opt)};
}

}  // namespace lsnn
