#pragma once

// Adam / AMSGrad over named parameter tensors, and step-decay learning rates.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lsnn/errors.hpp"

namespace lsnn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;  // added outside the square root
  bool amsgrad = false;
  double weight_decay = 0.0;  // L2 coefficient folded into the gradient

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be > 0");
    if (weight_decay < 0.0) throw ConfigError("adam: weight_decay must be >= 0");
  }
};

/// One trainable tensor seen as a flat array. `mask` may be empty (all active);
/// coordinates where mask == 0 are dormant and never touched.
struct ParamRef {
  std::string name;
  std::span<double> value;
  std::span<const double> grad;
  std::span<const double> mask;
};

template <typename Derived>
std::span<double> flat(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename Derived>
std::span<const double> flat(const Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

class Adam {
 public:
  struct Slot {
    Eigen::VectorXd m, v, vmax;
  };

  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return t_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

  /// Restores a saved state (checkpoint loading).
  void restore(long steps, std::map<std::string, Slot> slots) {
    t_ = steps;
    slots_ = std::move(slots);
  }

  /// Starts a new update; must precede the direction() calls of that update.
  void begin_step() { ++t_; }

  /// Updates the moments of the active coordinates of `p` and writes the
  /// proposed increment into `out` (0 for dormant coordinates).
  void direction(const ParamRef& p, double lr, std::span<double> out) {
    if (t_ < 1) throw InvariantError("adam: direction() before begin_step()");
    const std::size_t n = p.value.size();
    if (p.grad.size() != n || out.size() != n || (!p.mask.empty() && p.mask.size() != n))
      throw ConfigError("adam: shape mismatch for '" + p.name + "'");
    Slot& s = slot(p.name, n);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::isfinite(p.grad[k]))
        throw DivergenceError("adam: non-finite gradient in '" + p.name + "'", -1, static_cast<int>(k));
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (!p.mask.empty() && p.mask[k] == 0.0) {
        out[k] = 0.0;
        continue;
      }
      const double g = p.grad[k] + cfg_.weight_decay * p.value[k];
      s.m[k] = cfg_.beta1 * s.m[k] + (1.0 - cfg_.beta1) * g;
      s.v[k] = cfg_.beta2 * s.v[k] + (1.0 - cfg_.beta2) * g * g;
      double second = s.v[k];
      if (cfg_.amsgrad) {
        s.vmax[k] = std::max(s.vmax[k], s.v[k]);
        second = s.vmax[k];
      }
      out[k] = -lr * (s.m[k] / bc1) / (std::sqrt(second / bc2) + cfg_.eps);
    }
  }

  /// Clears the moments of one coordinate (DEEP R reactivation).
  void reset(const std::string& name, std::size_t index) {
    auto it = slots_.find(name);
    if (it == slots_.end()) return;
    it->second.m[index] = 0.0;
    it->second.v[index] = 0.0;
    if (it->second.vmax.size() > 0) it->second.vmax[index] = 0.0;
  }

 private:
  Slot& slot(const std::string& name, std::size_t n) {
    auto [it, inserted] = slots_.try_emplace(name);
    Slot& s = it->second;
    const auto size = static_cast<Eigen::Index>(n);
    if (inserted) {
      s.m = Eigen::VectorXd::Zero(size);
      s.v = Eigen::VectorXd::Zero(size);
      s.vmax = Eigen::VectorXd::Zero(cfg_.amsgrad ? size : 0);
    } else if (s.m.size() != size) {
      throw ConfigError("adam: parameter '" + name + "' changed shape");
    }
    return s;
  }

  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Slot> slots_;
};

/// One Adam update applied in place to every tensor in `params`.
inline void adam_step(Adam& opt, const std::vector<ParamRef>& params, double lr) {
  opt.begin_step();
  std::vector<double> delta;
  for (const auto& p : params) {
    delta.assign(p.value.size(), 0.0);
    opt.direction(p, lr, delta);
    for (std::size_t k = 0; k < delta.size(); ++k) p.value[k] += delta[k];
  }
}

struct LrSchedule {
  double initial = 0.01;
  double factor = 1.0;
  long interval = 1;

  void validate() const {
    if (!(initial >= 0.0)) throw ConfigError("lr schedule: initial rate must be >= 0");
    if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("lr schedule: factor must be in (0, 1]");
    if (interval < 1) throw ConfigError("lr schedule: interval must be >= 1");
  }
};

inline double lr_at(const LrSchedule& s, long iteration) {
  if (iteration < 0) throw ConfigError("lr_at: negative iteration");
  return s.initial * std::pow(s.factor, static_cast<double>(iteration / s.interval));
}

}  // namespace lsnn
