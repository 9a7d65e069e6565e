#pragma once

// Discrete-time adaptive leaky integrate-and-fire network.
//
// Step t (dt fixed, spikes z in {0,1}):
//   I_t = sum_i W_in[j,i] x_{t-d_in[j,i]}[i] + sum_i W_rec[j,i] z_{t-d_rec[j,i]}[i] (+ noise)
//   V_t = alpha V_{t-1} + (1-alpha) I_t - A_{t-1} z_{t-1}
//   A_t = b0 + beta b_{t-1}                 threshold used for the decision at t
//   z_t = [not refractory] * [V_t >= A_t]
//   b_t = rho b_{t-1} + (1-rho) z_t
//   y_t = kappa y_{t-1} + W_out z_t
//
// Input delays may be 0 (same-step delivery); recurrent delays are >= 1
// because z_t is decided after I_t is formed.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lsnn/errors.hpp"

namespace lsnn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;  // W(post, pre), column-major
using IntMatrix = Eigen::MatrixXi;
using Trace = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FlagTrace =
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::span<const double> row_span(const Trace& trace, Eigen::Index row) {
  return {trace.data() + row * trace.cols(), static_cast<std::size_t>(trace.cols())};
}

struct NeuronParams {
  double tau_m = 20.0;       // ms
  double tau_a = 700.0;      // ms
  double beta = 0.0;         // 0 for regular neurons
  double b0 = 0.01;          // baseline threshold
  double refractory = 0.0;   // ms
};

/// Number of suppressed steps following a spike.
inline int refractory_steps(double refractory_ms, double dt) {
  return static_cast<int>(std::ceil(refractory_ms / dt - 1e-9));
}

struct NetworkParams {
  Matrix w_in;   // n_rec x n_in
  Matrix w_rec;  // n_rec x n_rec, zero diagonal
  Matrix w_out;  // n_out x n_rec
  IntMatrix delay_in;
  IntMatrix delay_rec;
  Matrix mask_in;
  Matrix mask_rec;
  Matrix mask_out;
  // Dale signs (+1/-1) of the recurrent neurons; constrain columns of w_rec
  // and w_out. in_signs constrains the columns of w_in.
  std::optional<Vector> rec_signs;
  std::optional<Vector> in_signs;
  std::vector<NeuronParams> neurons;
  double tau_out = 20.0;  // 0: memoryless readout, +inf: pure accumulator
  double dt = 1.0;        // ms
  Vector noise_sigma;     // per-neuron current-noise std; empty disables noise

  int n_in() const { return static_cast<int>(w_in.cols()); }
  int n_rec() const { return static_cast<int>(w_rec.rows()); }
  int n_out() const { return static_cast<int>(w_out.rows()); }
  bool has_noise() const { return noise_sigma.size() > 0; }

  int max_delay() const {
    int d = 0;
    if (delay_in.size() > 0) d = std::max(d, delay_in.maxCoeff());
    if (delay_rec.size() > 0) d = std::max(d, delay_rec.maxCoeff());
    return d;
  }

  double readout_decay() const {
    if (tau_out == 0.0) return 0.0;
    if (std::isinf(tau_out)) return 1.0;
    return std::exp(-dt / tau_out);
  }

  /// Zeroes every masked-out weight.
  void apply_masks() {
    w_in.array() *= mask_in.array();
    w_rec.array() *= mask_rec.array();
    w_out.array() *= mask_out.array();
  }

  /// Throws ConfigError listing every violated invariant.
  void validate() const;
};

namespace detail {

inline void check_sign_columns(const Matrix& w, const Matrix& mask, const Vector& signs,
                               const char* name, std::vector<std::string>& problems) {
  if (signs.size() != w.cols()) {
    problems.push_back(std::string(name) + ": sign vector length mismatch");
    return;
  }
  for (Eigen::Index i = 0; i < w.cols(); ++i) {
    if (signs[i] != 1.0 && signs[i] != -1.0) {
      problems.push_back(std::string(name) + ": signs must be +1 or -1");
      return;
    }
    for (Eigen::Index j = 0; j < w.rows(); ++j) {
      if (mask(j, i) != 0.0 && w(j, i) * signs[i] < 0.0) {
        std::ostringstream os;
        os << name << "(" << j << "," << i << ") violates the sign of presynaptic neuron " << i;
        problems.push_back(os.str());
        return;
      }
    }
  }
}

inline void check_mask(const Matrix& w, const Matrix& mask, const char* name,
                       std::vector<std::string>& problems) {
  if (mask.rows() != w.rows() || mask.cols() != w.cols()) {
    problems.push_back(std::string(name) + ": mask shape mismatch");
    return;
  }
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    const double m = mask.data()[k];
    if (m != 0.0 && m != 1.0) {
      problems.push_back(std::string(name) + ": mask is not binary");
      return;
    }
    if (m == 0.0 && w.data()[k] != 0.0) {
      problems.push_back(std::string(name) + ": masked-out weight is nonzero");
      return;
    }
    if (!std::isfinite(w.data()[k])) {
      problems.push_back(std::string(name) + ": non-finite weight");
      return;
    }
  }
}

}  // namespace detail

inline void NetworkParams::validate() const {
  std::vector<std::string> problems;
  const auto n = w_rec.rows();
  if (w_rec.cols() != n) problems.push_back("w_rec must be square");
  if (w_in.rows() != n) problems.push_back("w_in rows must equal n_rec");
  if (w_out.cols() != n) problems.push_back("w_out cols must equal n_rec");
  if (delay_in.rows() != w_in.rows() || delay_in.cols() != w_in.cols())
    problems.push_back("delay_in shape mismatch");
  if (delay_rec.rows() != n || delay_rec.cols() != n) problems.push_back("delay_rec shape mismatch");
  if (static_cast<Eigen::Index>(neurons.size()) != n) problems.push_back("one NeuronParams per neuron required");
  if (!(dt > 0.0)) problems.push_back("dt must be > 0");
  if (!(tau_out >= 0.0)) problems.push_back("tau_out must be >= 0");
  if (noise_sigma.size() != 0 && noise_sigma.size() != n) problems.push_back("noise_sigma length mismatch");
  for (std::size_t j = 0; j < neurons.size(); ++j) {
    const auto& p = neurons[j];
    if (!(p.tau_m > 0.0) || !(p.tau_a > 0.0) || !(p.b0 > 0.0) || !(p.beta >= 0.0) ||
        !(p.refractory >= 0.0)) {
      problems.push_back("neuron " + std::to_string(j) +
                         ": requires tau_m > 0, tau_a > 0, b0 > 0, beta >= 0, refractory >= 0");
      break;
    }
  }
  if (problems.empty()) {
    if (delay_in.size() > 0 && delay_in.minCoeff() < 0) problems.push_back("input delays must be >= 0");
    if (delay_rec.size() > 0 && delay_rec.minCoeff() < 1) problems.push_back("recurrent delays must be >= 1");
    detail::check_mask(w_in, mask_in, "w_in", problems);
    detail::check_mask(w_rec, mask_rec, "w_rec", problems);
    detail::check_mask(w_out, mask_out, "w_out", problems);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (w_rec(j, j) != 0.0 || (mask_rec.size() > 0 && mask_rec(j, j) != 0.0)) {
        problems.push_back("w_rec diagonal must be zero and masked");
        break;
      }
    }
    if (rec_signs) {
      detail::check_sign_columns(w_rec, mask_rec, *rec_signs, "w_rec", problems);
      detail::check_sign_columns(w_out, mask_out, *rec_signs, "w_out", problems);
    }
    if (in_signs) detail::check_sign_columns(w_in, mask_in, *in_signs, "w_in", problems);
  }
  if (!problems.empty()) {
    std::string msg = "invalid network parameters:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

/// Zero weights, full connectivity (no self-connections), unit delays.
inline NetworkParams make_network(int n_in, int n_rec, int n_out, std::vector<NeuronParams> neurons) {
  if (static_cast<int>(neurons.size()) != n_rec) throw ConfigError("make_network: neuron count mismatch");
  NetworkParams p;
  p.w_in = Matrix::Zero(n_rec, n_in);
  p.w_rec = Matrix::Zero(n_rec, n_rec);
  p.w_out = Matrix::Zero(n_out, n_rec);
  p.delay_in = IntMatrix::Ones(n_rec, n_in);
  p.delay_rec = IntMatrix::Ones(n_rec, n_rec);
  p.mask_in = Matrix::Ones(n_rec, n_in);
  p.mask_rec = Matrix::Ones(n_rec, n_rec);
  p.mask_rec.diagonal().setZero();
  p.mask_out = Matrix::Ones(n_out, n_rec);
  p.neurons = std::move(neurons);
  return p;
}

inline NetworkParams make_network(int n_in, int n_rec, int n_out, const NeuronParams& proto) {
  return make_network(n_in, n_rec, n_out, std::vector<NeuronParams>(n_rec, proto));
}

namespace detail {

struct NeuronConstants {
  double alpha;
  double gain;  // 1 - alpha
  double rho;
  double beta;
  double b0;
  int refractory_steps;
};

inline std::vector<NeuronConstants> neuron_constants(const NetworkParams& p) {
  std::vector<NeuronConstants> out;
  out.reserve(p.neurons.size());
  for (const auto& n : p.neurons) {
    const double alpha = std::exp(-p.dt / n.tau_m);
    out.push_back({alpha, 1.0 - alpha, std::exp(-p.dt / n.tau_a), n.beta, n.b0,
                   refractory_steps(n.refractory, p.dt)});
  }
  return out;
}

/// One neuron, one step. `threshold` and `z` hold the previous decision on
/// entry and the new one on exit. Returns true if the spike was suppressed by
/// refractoriness.
inline bool advance_neuron(const NeuronConstants& c, double current, double& v, double& b,
                           double& z, double& threshold, int& refractory) {
  v = c.alpha * v + c.gain * current - threshold * z;
  const double a = c.b0 + c.beta * b;
  const bool suppressed = refractory > 0;
  if (suppressed) {
    --refractory;
    z = 0.0;
  } else {
    z = v >= a ? 1.0 : 0.0;
    if (z != 0.0) refractory = c.refractory_steps;
  }
  threshold = a;
  b = c.rho * b + (1.0 - c.rho) * z;
  return suppressed;
}

[[noreturn]] inline void throw_divergence(int step, int neuron) {
  std::ostringstream os;
  os << "simulation diverged: non-finite membrane state at step " << step << ", neuron " << neuron;
  throw DivergenceError(os.str(), step, neuron);
}

}  // namespace detail

/// Ring buffer of past input values and network spikes, deep enough for the
/// largest synaptic delay.
class SpikeHistory {
 public:
  SpikeHistory() = default;
  SpikeHistory(int n_in, int n_rec, int max_delay)
      : depth_(max_delay + 1),
        inputs_(Trace::Zero(max_delay + 1, n_in)),
        spikes_(Trace::Zero(max_delay + 1, n_rec)) {}

  int depth() const { return depth_; }

  void record_input(int t, std::span<const double> x) {
    for (std::size_t i = 0; i < x.size(); ++i) inputs_(slot(t), static_cast<Eigen::Index>(i)) = x[i];
  }
  void record_spikes(int t, const Vector& z) { spikes_.row(slot(t)) = z.transpose(); }

  /// Value of input i at step t; zero before the first step.
  double input(int t, int i) const { return t < 0 ? 0.0 : inputs_(slot(t), i); }
  double spike(int t, int i) const { return t < 0 ? 0.0 : spikes_(slot(t), i); }

 private:
  Eigen::Index slot(int t) const { return t % depth_; }

  int depth_ = 1;
  Trace inputs_;
  Trace spikes_;
};

struct NetworkState {
  int step = -1;  // last completed step
  Vector v;
  Vector b;
  Vector z;
  Vector y;
  Vector threshold;  // threshold used for the last spike decision
  Eigen::VectorXi refractory;
  SpikeHistory history;
};

inline NetworkState initial_state(const NetworkParams& p) {
  NetworkState s;
  const int n = p.n_rec();
  s.v = Vector::Zero(n);
  s.b = Vector::Zero(n);
  s.z = Vector::Zero(n);
  s.y = Vector::Zero(p.n_out());
  s.threshold = Vector::Zero(n);
  for (int j = 0; j < n; ++j) s.threshold[j] = p.neurons[j].b0;
  s.refractory = Eigen::VectorXi::Zero(n);
  s.history = SpikeHistory(p.n_in(), n, p.max_delay());
  return s;
}

/// Current into every neuron at step t, read from the spike history.
inline Vector synaptic_current(const SpikeHistory& history, const NetworkParams& p, int t) {
  if (p.max_delay() >= history.depth())
    throw ConfigError("synaptic_current: delay exceeds spike history depth");
  const int n = p.n_rec();
  Vector current = Vector::Zero(n);
  for (int i = 0; i < p.n_in(); ++i) {
    for (int j = 0; j < n; ++j) {
      if (p.mask_in(j, i) == 0.0) continue;
      current[j] += p.w_in(j, i) * history.input(t - p.delay_in(j, i), i);
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (p.mask_rec(j, i) == 0.0) continue;
      current[j] += p.w_rec(j, i) * history.spike(t - p.delay_rec(j, i), i);
    }
  }
  return current;
}

/// Voltage, spike and threshold update for one step given this step's current.
inline NetworkState membrane_step(NetworkState state, const Vector& current, const NetworkParams& p) {
  const auto constants = detail::neuron_constants(p);
  const int t = state.step + 1;
  for (int j = 0; j < p.n_rec(); ++j) {
    detail::advance_neuron(constants[j], current[j], state.v[j], state.b[j], state.z[j],
                           state.threshold[j], state.refractory[j]);
    if (!std::isfinite(state.v[j]) || !std::isfinite(state.b[j])) detail::throw_divergence(t, j);
  }
  state.step = t;
  return state;
}

inline Vector readout_step(const Vector& y, const Vector& z, const NetworkParams& p) {
  return p.readout_decay() * y + p.w_out * z;
}

/// Reference composition of one full step: record input, form the current
/// from the history, integrate, spike, record spikes, update the readout.
/// `noise` holds standard-normal draws scaled by noise_sigma (may be empty).
inline NetworkState network_step(NetworkState state, std::span<const double> x, const NetworkParams& p,
                                 std::span<const double> noise = {}) {
  const int t = state.step + 1;
  state.history.record_input(t, x);
  Vector current = synaptic_current(state.history, p, t);
  if (!noise.empty() && p.has_noise())
    for (int j = 0; j < p.n_rec(); ++j) current[j] += p.noise_sigma[j] * noise[j];
  state = membrane_step(std::move(state), current, p);
  state.history.record_spikes(t, state.z);
  state.y = readout_step(state.y, state.z, p);
  return state;
}

/// Everything the backward pass needs, one row per step.
struct SimTape {
  int steps = 0;
  Trace inputs;      // T x n_in
  Trace voltage;     // V_t after integration, before the spike decision
  Trace threshold;   // A_t
  Trace adaptation;  // b_t after the spike-driven update
  Trace spikes;      // z_t
  Trace current;     // I_t including noise
  Trace readout;     // y_t
  Trace noise;       // standard-normal draws, T x n_rec, or empty
  FlagTrace refractory;  // 1 where the decision was suppressed
};

/// Push-based simulator: each spike is scattered once into a ring of
/// future currents, so the cost per step scales with the spike count.
class Simulator {
 public:
  Simulator(const NetworkParams& params, bool record, int reserve_steps = 0)
      : p_(params), record_(record), constants_(detail::neuron_constants(params)) {
    params.validate();
    const int n = p_.n_rec();
    depth_ = p_.max_delay() + 1;
    ring_ = Trace::Zero(depth_, n);
    v_ = Vector::Zero(n);
    b_ = Vector::Zero(n);
    z_ = Vector::Zero(n);
    current_ = Vector::Zero(n);
    y_ = Vector::Zero(p_.n_out());
    threshold_ = Vector::Zero(n);
    for (int j = 0; j < n; ++j) threshold_[j] = p_.neurons[j].b0;
    refractory_ = Eigen::VectorXi::Zero(n);
    kappa_ = p_.readout_decay();
    uniform_in_ = uniform_delay(p_.delay_in);
    uniform_rec_ = uniform_delay(p_.delay_rec);
    if (record_) reserve(std::max(reserve_steps, 1));
  }

  /// Advances one step. `noise` holds standard-normal draws and is only used
  /// when the network has noise_sigma configured.
  void step(std::span<const double> x, std::span<const double> noise = {}) {
    const int n = p_.n_rec();
    const int t = ++t_;
    const Eigen::Index now = t % depth_;
    for (int i = 0; i < p_.n_in(); ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      if (uniform_in_ >= 0) {
        ring_.row((t + uniform_in_) % depth_) += xi * p_.w_in.col(i).transpose();
      } else {
        const double* w = p_.w_in.col(i).data();
        const int* d = p_.delay_in.col(i).data();
        for (int j = 0; j < n; ++j) ring_((t + d[j]) % depth_, j) += w[j] * xi;
      }
    }
    current_ = ring_.row(now).transpose();
    ring_.row(now).setZero();
    const bool noisy = p_.has_noise() && !noise.empty();
    if (noisy)
      for (int j = 0; j < n; ++j) current_[j] += p_.noise_sigma[j] * noise[j];

    if (record_) {
      if (t >= tape_.voltage.rows()) reserve(2 * (t + 1));
      tape_.inputs.row(t) = Eigen::Map<const Eigen::RowVectorXd>(x.data(), p_.n_in());
      tape_.current.row(t) = current_.transpose();
      if (noisy) tape_.noise.row(t) = Eigen::Map<const Eigen::RowVectorXd>(noise.data(), n);
    }

    for (int j = 0; j < n; ++j) {
      const bool suppressed = detail::advance_neuron(constants_[j], current_[j], v_[j], b_[j], z_[j],
                                                     threshold_[j], refractory_[j]);
      if (!std::isfinite(v_[j]) || !std::isfinite(b_[j])) detail::throw_divergence(t, j);
      if (record_) {
        tape_.voltage(t, j) = v_[j];
        tape_.refractory(t, j) = suppressed ? 1 : 0;
      }
    }

    y_ *= kappa_;
    for (int i = 0; i < n; ++i) {
      if (z_[i] == 0.0) continue;
      y_ += p_.w_out.col(i);
      if (uniform_rec_ >= 0) {
        ring_.row((t + uniform_rec_) % depth_) += p_.w_rec.col(i).transpose();
      } else {
        const double* w = p_.w_rec.col(i).data();
        const int* d = p_.delay_rec.col(i).data();
        for (int j = 0; j < n; ++j) ring_((t + d[j]) % depth_, j) += w[j];
      }
    }

    if (record_) {
      tape_.threshold.row(t) = threshold_.transpose();
      tape_.adaptation.row(t) = b_.transpose();
      tape_.spikes.row(t) = z_.transpose();
      tape_.readout.row(t) = y_.transpose();
    }
  }

  int steps() const { return t_ + 1; }
  const Vector& spikes() const { return z_; }
  const Vector& readout() const { return y_; }
  const Vector& voltage() const { return v_; }
  const Vector& adaptation() const { return b_; }
  const Vector& threshold() const { return threshold_; }

  /// Moves the recorded tape out, trimmed to the simulated length.
  SimTape take_tape() {
    if (!record_) throw InvariantError("Simulator::take_tape: recording was disabled");
    const int T = steps();
    auto trim = [T](Trace& tr) { tr.conservativeResize(T, tr.cols()); };
    trim(tape_.inputs);
    trim(tape_.voltage);
    trim(tape_.threshold);
    trim(tape_.adaptation);
    trim(tape_.spikes);
    trim(tape_.current);
    trim(tape_.readout);
    if (tape_.noise.cols() > 0)
      trim(tape_.noise);
    else
      tape_.noise.resize(0, 0);
    tape_.refractory.conservativeResize(T, tape_.refractory.cols());
    tape_.steps = T;
    return std::move(tape_);
  }

 private:
  static int uniform_delay(const IntMatrix& d) {
    if (d.size() == 0) return 1;
    return d.minCoeff() == d.maxCoeff() ? d(0, 0) : -1;
  }

  void reserve(int rows) {
    const int n = p_.n_rec();
    auto grow = [rows](Trace& tr, Eigen::Index cols) {
      const auto old = tr.rows();
      tr.conservativeResize(rows, cols);
      if (rows > old) tr.bottomRows(rows - old).setZero();
    };
    grow(tape_.inputs, p_.n_in());
    grow(tape_.voltage, n);
    grow(tape_.threshold, n);
    grow(tape_.adaptation, n);
    grow(tape_.spikes, n);
    grow(tape_.current, n);
    grow(tape_.readout, p_.n_out());
    grow(tape_.noise, p_.has_noise() ? n : 0);
    const auto old = tape_.refractory.rows();
    tape_.refractory.conservativeResize(rows, n);
    if (rows > old) tape_.refractory.bottomRows(rows - old).setZero();
  }

  const NetworkParams& p_;
  bool record_;
  std::vector<detail::NeuronConstants> constants_;
  int depth_ = 1;
  int t_ = -1;
  int uniform_in_ = -1;
  int uniform_rec_ = -1;
  double kappa_ = 0.0;
  Trace ring_;
  Vector v_, b_, z_, y_, threshold_, current_;
  Eigen::VectorXi refractory_;
  SimTape tape_;
};

struct SimResult {
  Trace raster;   // T x n_rec
  Trace readout;  // T x n_out
  std::optional<SimTape> tape;
};

/// Runs the network over `inputs` (T x n_in). When the network has current
/// noise, `noise` supplies the standard-normal draws (T x n_rec).
inline SimResult simulate(const NetworkParams& p, const Trace& inputs, const Trace& noise, bool record) {
  if (inputs.rows() < 1) throw ConfigError("simulate: input length must be >= 1");
  if (inputs.cols() != p.n_in()) throw ConfigError("simulate: input width does not match n_in");
  const bool noisy = p.has_noise();
  if (noisy && (noise.rows() != inputs.rows() || noise.cols() != p.n_rec()))
    throw ConfigError("simulate: noise draws must be T x n_rec");
  const int T = static_cast<int>(inputs.rows());
  Simulator sim(p, record, T);
  SimResult out;
  out.raster = Trace::Zero(T, p.n_rec());
  out.readout = Trace::Zero(T, p.n_out());
  for (int t = 0; t < T; ++t) {
    sim.step(row_span(inputs, t), noisy ? row_span(noise, t) : std::span<const double>{});
    out.raster.row(t) = sim.spikes().transpose();
    out.readout.row(t) = sim.readout().transpose();
  }
  if (record) out.tape = sim.take_tape();
  return out;
}

/// Draws standard-normal noise for a T-step run (empty if the network is noiseless).
inline Trace draw_noise(const NetworkParams& p, int steps, std::mt19937_64& rng) {
  if (!p.has_noise()) return Trace(0, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Trace noise(steps, p.n_rec());
  for (Eigen::Index k = 0; k < noise.size(); ++k) noise.data()[k] = normal(rng);
  return noise;
}

inline SimResult simulate(const NetworkParams& p, const Trace& inputs, bool record, std::mt19937_64& rng) {
  return simulate(p, inputs, draw_noise(p, static_cast<int>(inputs.rows()), rng), record);
}

}  // namespace lsnn
