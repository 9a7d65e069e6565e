#pragma once

// Circular-arena navigation, Gaussian policy and value heads on the readouts,
// discounted returns and PPO training with entropy, value and firing-rate terms.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lsnn/encode.hpp"
#include "lsnn/errors.hpp"
#include "lsnn/grad_engine.hpp"
#include "lsnn/snn_core.hpp"
#include "lsnn/training.hpp"

namespace lsnn {

struct ArenaConfig {
  double arena_radius = 1.0;
  double goal_radius = 0.3;
  double goal_center_radius = 0.85;  // 0 puts the goal at the centre
  double a_scale = 0.02;
  double goal_reward = 1.0;
  double wall_penalty = -0.02;
  int steps = 2000;

  void validate() const {
    std::vector<std::string> bad;
    if (!(arena_radius > 0.0)) bad.push_back("arena.arena_radius must be > 0");
    if (!(goal_radius > 0.0)) bad.push_back("arena.goal_radius must be > 0");
    if (!(goal_center_radius >= 0.0)) bad.push_back("arena.goal_center_radius must be >= 0");
    if (!(goal_center_radius - goal_radius < arena_radius))
      bad.push_back("arena: goal circle must intersect the arena");
    if (!(a_scale > 0.0)) bad.push_back("arena.a_scale must be > 0");
    if (steps < 1) bad.push_back("arena.steps must be >= 1");
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      throw ConfigError(msg);
    }
  }
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  double norm() const { return std::hypot(x, y); }
};

struct ArenaState {
  Vec2 pos;
  Vec2 goal;
};

struct EnvStep {
  double reward = 0.0;
  bool goal_reached = false;
  bool hit_wall = false;
};

inline Vec2 uniform_in_disc(double radius, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = radius * std::sqrt(u(rng)), phi = 2.0 * std::numbers::pi * u(rng);
  return {r * std::cos(phi), r * std::sin(phi)};
}

/// Goal on the circle of radius goal_center_radius, agent uniform in the disc.
inline ArenaState env_reset(const ArenaConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  const double phi = u(rng);
  ArenaState s;
  s.goal = {cfg.goal_center_radius * std::cos(phi), cfg.goal_center_radius * std::sin(phi)};
  s.pos = uniform_in_disc(cfg.arena_radius, rng);
  return s;
}

/// Moves by `velocity`, stopping at the border; a goal hit respawns the agent.
inline EnvStep env_step(const ArenaConfig& cfg, ArenaState& s, Vec2 velocity, std::mt19937_64& rng) {
  EnvStep out;
  Vec2 next{s.pos.x + velocity.x, s.pos.y + velocity.y};
  const double R = cfg.arena_radius;
  if (next.norm() > R) {
    // Largest t in [0, 1] with |pos + t v| = R.
    const double a = velocity.x * velocity.x + velocity.y * velocity.y;
    const double b = 2.0 * (s.pos.x * velocity.x + s.pos.y * velocity.y);
    const double c = s.pos.x * s.pos.x + s.pos.y * s.pos.y - R * R;
    const double t = std::clamp((-b + std::sqrt(std::max(0.0, b * b - 4.0 * a * c))) / (2.0 * a), 0.0, 1.0);
    next = {s.pos.x + t * velocity.x, s.pos.y + t * velocity.y};
    const double n = next.norm();
    if (n > R) next = {next.x * R / n, next.y * R / n};
    out.reward += cfg.wall_penalty;
    out.hit_wall = true;
  }
  s.pos = next;
  if (std::hypot(s.pos.x - s.goal.x, s.pos.y - s.goal.y) <= cfg.goal_radius) {
    out.reward += cfg.goal_reward;
    out.goal_reached = true;
    s.pos = uniform_in_disc(R, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy

enum class VarianceMode { variance, std_dev };

/// Mean tanh(y1), tanh(y2); spread sigma(y3), sigma(y4) read as the variance
/// (or the standard deviation in std_dev mode).
struct PolicyHead {
  double mean[2];
  double var[2];
  double dvar_dy[2];  // d variance / d y3, y4
};

inline PolicyHead policy_head(const Vector& y, VarianceMode mode) {
  PolicyHead h;
  for (int d = 0; d < 2; ++d) {
    h.mean[d] = std::tanh(y[d]);
    const double s = 1.0 / (1.0 + std::exp(-y[2 + d]));
    if (mode == VarianceMode::variance) {
      h.var[d] = s;
      h.dvar_dy[d] = s * (1.0 - s);
    } else {
      h.var[d] = s * s;
      h.dvar_dy[d] = 2.0 * s * s * (1.0 - s);
    }
  }
  return h;
}

struct Action {
  double raw[2];    // unclipped Gaussian sample
  double noise[2];  // standard-normal draws used for the sample
  Vec2 velocity;
};

/// Samples an action from the readouts y1..y4 (entries 0..3 of `y`).
inline Action decode_action(const Vector& y, double a_scale, VarianceMode mode, std::mt19937_64& rng) {
  if (y.size() < 4) throw ConfigError("decode_action: need at least 4 readouts");
  const PolicyHead h = policy_head(y, mode);
  std::normal_distribution<double> normal(0.0, 1.0);
  Action a;
  for (int d = 0; d < 2; ++d) {
    a.noise[d] = normal(rng);
    a.raw[d] = h.mean[d] + std::sqrt(h.var[d]) * a.noise[d];
  }
  Vec2 v{a_scale * a.raw[0], a_scale * a.raw[1]};
  const double n = v.norm();
  if (n > a_scale) v = {v.x * a_scale / n, v.y * a_scale / n};
  a.velocity = v;
  return a;
}

struct LogpEntropy {
  double logp = 0.0;
  double entropy = 0.0;
};

/// Diagonal Gaussian log density of `action` and the distribution's entropy.
inline LogpEntropy gaussian_logp_entropy(const double action[2], const double mean[2], const double var[2]) {
  LogpEntropy out;
  for (int d = 0; d < 2; ++d) {
    if (!(var[d] > 0.0)) throw InvariantError("gaussian_logp_entropy: variance must be > 0");
    const double e = action[d] - mean[d];
    out.logp += -0.5 * std::log(2.0 * std::numbers::pi * var[d]) - e * e / (2.0 * var[d]);
    out.entropy += 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var[d]);
  }
  return out;
}

/// R(t) = sum_{t' > t} eta^{t'-t} r(t').
inline std::vector<double> discounted_returns(const std::vector<double>& rewards, double eta) {
  std::vector<double> R(rewards.size(), 0.0);
  for (std::size_t t = rewards.size(); t-- > 1;) R[t - 1] = eta * (rewards[t] + R[t]);
  return R;
}

/// min(r A, clip(r, 1 - eps, 1 + eps) A).
inline double ppo_surrogate(double ratio, double advantage, double eps) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

/// d surrogate / d ratio: A on the unclipped branch, 0 where clipping binds.
inline double ppo_surrogate_dratio(double ratio, double advantage, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return ratio * advantage <= clipped * advantage ? advantage : 0.0;
}

// ---------------------------------------------------------------------------
// Rollouts

struct PPOConfig {
  double clip = 0.2;
  double discount = 0.99;
  double mu_v = 1.0;
  double mu_e = 0.001;
  double mu_firing = 100.0;
  double f0_hz = 10.0;
  int episodes = 10;  // K
  std::string variance_mode = "variance";  // variance | std
  int position_neurons = 40;
  double position_rate_hz = 500.0;
  int reward_neurons = 40;
  int verify_every = 0;  // iterations between re-simulation checks (0: never)

  VarianceMode mode() const { return variance_mode == "std" ? VarianceMode::std_dev : VarianceMode::variance; }
  int n_in() const { return 2 * position_neurons + 2 * reward_neurons; }

  void validate() const {
    std::vector<std::string> bad;
    if (!(clip > 0.0 && clip < 1.0)) bad.push_back("ppo.clip must be in (0, 1)");
    if (!(discount > 0.0 && discount <= 1.0)) bad.push_back("ppo.discount must be in (0, 1]");
    if (!(mu_v >= 0.0 && mu_e >= 0.0 && mu_firing >= 0.0)) bad.push_back("ppo: coefficients must be >= 0");
    if (!(f0_hz >= 0.0)) bad.push_back("ppo.f0_hz must be >= 0");
    if (episodes < 1) bad.push_back("ppo.episodes must be >= 1");
    if (variance_mode != "variance" && variance_mode != "std") bad.push_back("ppo.variance_mode must be 'variance' or 'std'");
    if (position_neurons < 1 || reward_neurons < 1) bad.push_back("ppo: encoder sizes must be >= 1");
    if (verify_every < 0) bad.push_back("ppo.verify_every must be >= 0");
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      throw ConfigError(msg);
    }
  }
};

struct Rollout {
  Trace inputs;                  // T x n_in observations as presented
  Trace noise;                   // current-noise draws (empty without noise)
  std::vector<Action> actions;
  std::vector<double> logp;      // under the behaviour policy
  std::vector<double> rewards;
  std::vector<double> values;    // y5 under the behaviour policy
  std::vector<Vec2> positions;   // position at which each action was taken
  int goals = 0;
  SimTape tape;

  int steps() const { return static_cast<int>(rewards.size()); }
};

/// Position tuning for x and y followed by the reward pulse of the previous step.
inline Vector arena_observation(const ArenaConfig& arena, const PPOConfig& ppo, Vec2 pos, double last_reward,
                                std::mt19937_64& rng) {
  const auto spec = TuningCurveSpec::arena(ppo.position_neurons, ppo.position_rate_hz);
  const double R = arena.arena_radius;
  Vector x(ppo.n_in());
  x.head(ppo.position_neurons) = encode_gaussian_tuning(pos.x / R, spec, rng);
  x.segment(ppo.position_neurons, ppo.position_neurons) = encode_gaussian_tuning(pos.y / R, spec, rng);
  x.tail(2 * ppo.reward_neurons) = encode_reward_pulse(last_reward, ppo.reward_neurons);
  return x;
}

/// Closed-loop episode under fixed parameters; the tape is always recorded.
inline Rollout collect_rollout(const NetworkParams& p, const ArenaConfig& arena, const PPOConfig& ppo,
                               std::mt19937_64& rng) {
  if (p.n_out() < 5) throw ConfigError("collect_rollout: policy needs 5 readouts");
  if (p.n_in() != ppo.n_in()) throw ConfigError("collect_rollout: network input size does not match the encoder");
  const int T = arena.steps;
  Rollout ro;
  ro.inputs.resize(T, p.n_in());
  ro.noise = draw_noise(p, T, rng);
  Simulator sim(p, true, T);
  ArenaState env = env_reset(arena, rng);
  double last_reward = 0.0;
  for (int t = 0; t < T; ++t) {
    ro.inputs.row(t) = arena_observation(arena, ppo, env.pos, last_reward, rng).transpose();
    sim.step(row_span(ro.inputs, t), p.has_noise() ? row_span(ro.noise, t) : std::span<const double>{});
    const Vector& y = sim.readout();
    const Action a = decode_action(y, arena.a_scale, ppo.mode(), rng);
    const PolicyHead h = policy_head(y, ppo.mode());
    ro.logp.push_back(gaussian_logp_entropy(a.raw, h.mean, h.var).logp);
    ro.values.push_back(y[4]);
    ro.positions.push_back(env.pos);
    ro.actions.push_back(a);
    const EnvStep r = env_step(arena, env, a.velocity, rng);
    ro.rewards.push_back(r.reward);
    ro.goals += r.goal_reached ? 1 : 0;
    last_reward = r.reward;
  }
  ro.tape = sim.take_tape();
  return ro;
}

/// Replays the stored observations and noise under `p`. With the behaviour
/// parameters the result must match the rollout bit for bit.
inline SimTape resimulate(const NetworkParams& p, const Rollout& ro) {
  return *simulate(p, ro.inputs, ro.noise, true).tape;
}

inline bool tapes_identical(const SimTape& a, const SimTape& b) {
  return a.spikes == b.spikes && a.readout == b.readout && a.voltage == b.voltage && a.adaptation == b.adaptation;
}

inline void verify_rollout(const NetworkParams& p, const Rollout& ro) {
  if (!tapes_identical(resimulate(p, ro), ro.tape))
    throw InvariantError("rollout re-simulation under the behaviour parameters is not bitwise identical");
}

// ---------------------------------------------------------------------------
// PPO loss

struct PPOLoss {
  double total = 0.0;
  double surrogate = 0.0;   // mean O^PPO
  double value = 0.0;       // mean (R - V)^2
  double entropy = 0.0;     // mean entropy
  double firing = 0.0;      // mean over neurons of squared rate deviation
  double mean_advantage = 0.0;
  std::vector<Cotangents> cotangents;  // one per rollout
};

/// Loss of the K rollouts evaluated on `tapes` (re-simulations under the new
/// parameters, or the rollout tapes themselves at theta = theta_old).
/// Rates in the firing term are per ms.
inline PPOLoss ppo_loss(const std::vector<Rollout>& rollouts, const std::vector<const SimTape*>& tapes,
                        const PPOConfig& ppo, double dt_ms = 1.0) {
  if (rollouts.empty() || rollouts.size() != tapes.size()) throw ConfigError("ppo_loss: need one tape per rollout");
  const int T = rollouts[0].steps();
  const double KT = static_cast<double>(rollouts.size()) * T;
  PPOLoss out;

  std::vector<const Trace*> rasters;
  for (const auto* t : tapes) rasters.push_back(&t->spikes);
  const auto reg = firing_rate_regularizer(rasters, ppo.f0_hz, dt_ms, RateUnit::per_ms);
  out.firing = reg.value;

  for (std::size_t k = 0; k < rollouts.size(); ++k) {
    const auto& ro = rollouts[k];
    const auto& tape = *tapes[k];
    if (ro.steps() != T || tape.steps != T) throw ConfigError("ppo_loss: rollouts must share one length");
    const auto R = discounted_returns(ro.rewards, ppo.discount);
    Cotangents cot;
    cot.readout = Trace::Zero(T, tape.readout.cols());
    for (int t = 0; t < T; ++t) {
      const Vector y = tape.readout.row(t).transpose();
      const PolicyHead h = policy_head(y, ppo.mode());
      const auto le = gaussian_logp_entropy(ro.actions[t].raw, h.mean, h.var);
      const double A = R[t] - ro.values[t];
      const double ratio = std::exp(le.logp - ro.logp[t]);
      const double V = y[4];
      out.surrogate += ppo_surrogate(ratio, A, ppo.clip) / KT;
      out.value += (R[t] - V) * (R[t] - V) / KT;
      out.entropy += le.entropy / KT;
      out.mean_advantage += A / KT;

      // d loss / d logp, then through the heads.
      const double dlogp = -ppo_surrogate_dratio(ratio, A, ppo.clip) * ratio / KT;
      for (int d = 0; d < 2; ++d) {
        const double e = ro.actions[t].raw[d] - h.mean[d];
        const double dmean = e / h.var[d];
        const double dvar = -0.5 / h.var[d] + e * e / (2.0 * h.var[d] * h.var[d]);
        const double dent_dvar = 0.5 / h.var[d];
        cot.readout(t, d) = dlogp * dmean * (1.0 - h.mean[d] * h.mean[d]);
        cot.readout(t, 2 + d) = (dlogp * dvar - ppo.mu_e * dent_dvar / KT) * h.dvar_dy[d];
      }
      cot.readout(t, 4) = -2.0 * ppo.mu_v * (R[t] - V) / KT;
    }
    if (ppo.mu_firing > 0.0) cot.spikes = ppo.mu_firing * reg.cotangents[k];
    out.cotangents.push_back(std::move(cot));
  }
  out.total = -out.surrogate + ppo.mu_v * out.value - ppo.mu_e * out.entropy + ppo.mu_firing * out.firing;
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct RLMetricRow {
  long iteration = 0;
  double loss = 0.0;
  double mean_reward = 0.0;  // summed reward per episode, averaged over K
  double goals = 0.0;        // goals per episode, averaged over K
  double rate_reg = 0.0;
};

struct RLHooks {
  std::function<void(const RLMetricRow&)> metrics;
  std::function<void(const TrainState&)> checkpoint;
  std::function<void(const std::string&)> log;
  std::function<void(long iteration, const std::vector<Rollout>&)> rollouts;
};

/// One Adam step per iteration on the PPO loss of K fresh rollouts; the
/// per-neuron noise std is trained alongside the weights when present.
inline void train_meta_rl(const ArenaConfig& arena, const PPOConfig& ppo, const NetworkConfig& net,
                          const TrainConfig& train, TrainState& s, const RLHooks& hooks = {}) {
  arena.validate();
  ppo.validate();
  train.validate();
  const bool noise = s.params.has_noise();
  for (; s.iteration < train.iterations;) {
    std::vector<Rollout> rollouts;
    for (int k = 0; k < ppo.episodes; ++k) rollouts.push_back(collect_rollout(s.params, arena, ppo, s.rng));
    if (ppo.verify_every > 0 && s.iteration % ppo.verify_every == 0)
      for (const auto& ro : rollouts) verify_rollout(s.params, ro);
    std::vector<const SimTape*> tapes;
    for (const auto& ro : rollouts) tapes.push_back(&ro.tape);
    const PPOLoss L = ppo_loss(rollouts, tapes, ppo, s.params.dt);
    Gradients g = Gradients::zeros_like(s.params);
    const auto opt = train.backward_options(noise);
    for (std::size_t k = 0; k < rollouts.size(); ++k) g += backward(rollouts[k].tape, s.params, L.cotangents[k], opt);
    if (hooks.rollouts) hooks.rollouts(s.iteration, rollouts);
    apply_gradients(s, g, net, train, noise);
    ++s.iteration;

    RLMetricRow row;
    row.iteration = s.iteration;
    row.loss = L.total;
    row.rate_reg = L.firing;
    for (const auto& ro : rollouts) {
      for (double r : ro.rewards) row.mean_reward += r / ppo.episodes;
      row.goals += static_cast<double>(ro.goals) / ppo.episodes;
    }
    if (hooks.metrics) hooks.metrics(row);
    if (hooks.log && s.iteration % train.log_every == 0)
      hooks.log("iter " + std::to_string(s.iteration) + " loss " + std::to_string(L.total) + " goals " +
                std::to_string(row.goals) + " reward " + std::to_string(row.mean_reward));
    if (hooks.checkpoint && train.checkpoint_every > 0 && s.iteration % train.checkpoint_every == 0)
      hooks.checkpoint(s);
  }
}

/// Mean goals per episode under the policy defined by the network.
inline double policy_goals(const NetworkParams& p, const ArenaConfig& arena, const PPOConfig& ppo, int episodes,
                           std::mt19937_64& rng) {
  double goals = 0.0;
  for (int e = 0; e < episodes; ++e) goals += collect_rollout(p, arena, ppo, rng).goals;
  return goals / episodes;
}

/// Mean goals per episode when actions are drawn with zero readouts
/// (mean 0, variance sigma(0)), i.e. a random walk independent of observations.
inline double random_policy_goals(const ArenaConfig& arena, const PPOConfig& ppo, int episodes, std::mt19937_64& rng) {
  const Vector y = Vector::Zero(5);
  double goals = 0.0;
  for (int e = 0; e < episodes; ++e) {
    ArenaState env = env_reset(arena, rng);
    for (int t = 0; t < arena.steps; ++t)
      goals += env_step(arena, env, decode_action(y, arena.a_scale, ppo.mode(), rng).velocity, rng).goal_reached;
  }
  return goals / episodes;
}

}  // namespace lsnn
