#pragma once

// Weight initialization (Gaussian and sign-constrained) and DEEP R rewiring.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lsnn/errors.hpp"
#include "lsnn/grad_engine.hpp"
#include "lsnn/optim.hpp"
#include "lsnn/snn_core.hpp"

namespace lsnn {

enum class InitScheme { gaussian, dale };

struct InitSpec {
  InitScheme scheme = InitScheme::gaussian;
  double w0 = 1.0;
  double frac_excitatory = 0.8;
  double connectivity = 1.0;

  void validate() const {
    if (!(w0 > 0.0)) throw ConfigError("init: w0 must be > 0");
    if (!(frac_excitatory >= 0.0 && frac_excitatory <= 1.0))
      throw ConfigError("init: frac_excitatory must be in [0, 1]");
    if (!(connectivity > 0.0 && connectivity <= 1.0)) throw ConfigError("init: connectivity must be in (0, 1]");
  }
};

/// i.i.d. entries with standard deviation w0 / sqrt(n_in).
inline Matrix init_gaussian(int n_out, int n_in, double w0, std::mt19937_64& rng) {
  if (n_in < 1) throw ConfigError("init_gaussian: n_in must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = w0 / std::sqrt(static_cast<double>(n_in));
  Matrix w(n_out, n_in);
  for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = scale * normal(rng);
  return w;
}

/// Bernoulli(frac_excitatory) signs, +1 excitatory and -1 inhibitory.
inline Vector draw_signs(int n, double frac_excitatory, std::mt19937_64& rng) {
  std::bernoulli_distribution exc(frac_excitatory);
  Vector s(n);
  for (int i = 0; i < n; ++i) s[i] = exc(rng) ? 1.0 : -1.0;
  return s;
}

/// n_exc leading +1 entries followed by n_inh entries of -1.
inline Vector block_signs(int n_exc, int n_inh) {
  Vector s(n_exc + n_inh);
  s.head(n_exc).setOnes();
  s.tail(n_inh).setConstant(-1.0);
  return s;
}

/// Largest eigenvalue magnitude.
inline double spectral_radius(const Matrix& w) {
  if (w.rows() != w.cols()) throw ConfigError("spectral_radius: matrix must be square");
  if (w.size() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> solver(w, false);
  if (solver.info() != Eigen::Success) throw InvariantError("spectral_radius: eigenvalue solver failed");
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

/// Shifts each row to zero sum by adding a constant to the magnitudes of the
/// lighter sign class only, so no entry changes sign. Rows missing one of the
/// classes are left alone.
inline void zero_row_sums(Matrix& w, const Vector& signs, const Matrix* mask = nullptr) {
  for (Eigen::Index j = 0; j < w.rows(); ++j) {
    double exc = 0.0, inh = 0.0;
    int n_exc = 0, n_inh = 0;
    for (Eigen::Index i = 0; i < w.cols(); ++i) {
      if (mask && (*mask)(j, i) == 0.0) continue;
      if (signs[i] > 0) {
        exc += w(j, i);
        ++n_exc;
      } else {
        inh -= w(j, i);
        ++n_inh;
      }
    }
    if (n_exc == 0 || n_inh == 0) continue;
    const bool raise_inh = exc > inh;
    const double c = raise_inh ? (exc - inh) / n_inh : (inh - exc) / n_exc;
    for (Eigen::Index i = 0; i < w.cols(); ++i) {
      if (mask && (*mask)(j, i) == 0.0) continue;
      if (raise_inh && signs[i] < 0) w(j, i) -= c;
      if (!raise_inh && signs[i] > 0) w(j, i) += c;
    }
  }
}

/// Square sign-constrained matrix with zero row sums and spectral radius 1.
inline Matrix dale_square(const Vector& signs, std::mt19937_64& rng, const Matrix* mask = nullptr) {
  const auto n = signs.size();
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    Matrix w(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) w(j, i) = signs[i] * std::abs(normal(rng));
    if (mask) w.array() *= mask->array();
    zero_row_sums(w, signs, mask);
    const double radius = spectral_radius(w);
    if (radius > 1e-12) return w / radius;
  }
  throw InvariantError("init_dale: spectral radius stayed numerically zero after 10 draws");
}

/// Sign-constrained initialization. Column i carries sign signs[i]. For a
/// non-square target a square matrix is built and rows/columns are
/// subsampled; `mask` is applied before normalization when the target is
/// square and after subsampling otherwise.
inline Matrix init_dale(int n_out, int n_in, const Vector& signs, double w0, std::mt19937_64& rng,
                        const Matrix* mask = nullptr) {
  if (signs.size() != n_in) throw ConfigError("init_dale: need one sign per column");
  if (mask && (mask->rows() != n_out || mask->cols() != n_in)) throw ConfigError("init_dale: mask shape mismatch");
  if (n_out == n_in) return w0 * dale_square(signs, rng, mask);

  const int n = std::max(n_out, n_in);
  std::vector<int> cols(n), rows(n);
  std::iota(cols.begin(), cols.end(), 0);
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(cols.begin(), cols.end(), rng);
  std::shuffle(rows.begin(), rows.end(), rng);
  cols.resize(n_in);
  rows.resize(n_out);
  std::sort(cols.begin(), cols.end());
  std::sort(rows.begin(), rows.end());

  // Columns that are not kept get signs at the same excitatory fraction.
  const double frac = (signs.array() > 0).cast<double>().mean();
  Vector full = draw_signs(n, frac, rng);
  for (int k = 0; k < n_in; ++k) full[cols[k]] = signs[k];
  const Matrix square = dale_square(full, rng);
  Matrix w(n_out, n_in);
  for (int r = 0; r < n_out; ++r)
    for (int c = 0; c < n_in; ++c) w(r, c) = w0 * square(rows[r], cols[c]);
  if (mask) w.array() *= mask->array();
  return w;
}

/// Exactly round(p * rows * cols) active entries chosen uniformly without
/// replacement (capped at the number of eligible positions).
inline Matrix sparse_mask(int rows, int cols, double p, std::mt19937_64& rng, bool exclude_diagonal = false) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("sparse_mask: p must be in (0, 1]");
  std::vector<Eigen::Index> eligible;
  eligible.reserve(static_cast<std::size_t>(rows) * cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r)
      if (!(exclude_diagonal && r == c)) eligible.push_back(c * rows + r);
  const auto wanted = static_cast<std::size_t>(std::llround(p * static_cast<double>(rows) * cols));
  const std::size_t count = std::min(wanted, eligible.size());
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, eligible.size() - 1);
    std::swap(eligible[k], eligible[pick(rng)]);
  }
  Matrix mask = Matrix::Zero(rows, cols);
  for (std::size_t k = 0; k < count; ++k) mask.data()[eligible[k]] = 1.0;
  return mask;
}

enum class RewireBudget { per_matrix, global };

struct RewireConfig {
  double l1_coeff = 0.01;
  double temperature = 0.0;
  double target_connectivity = 1.0;
  RewireBudget budget = RewireBudget::per_matrix;
  bool rewire_in = true;
  bool rewire_rec = true;
  bool rewire_out = true;

  void validate() const {
    if (l1_coeff < 0.0) throw ConfigError("rewire: l1_coeff must be >= 0");
    if (temperature < 0.0) throw ConfigError("rewire: temperature must be >= 0");
    if (!(target_connectivity > 0.0 && target_connectivity <= 1.0))
      throw ConfigError("rewire: target_connectivity must be in (0, 1]");
  }
};

/// Fixed sign of every synapse coordinate, active or dormant.
struct SynapseSigns {
  Matrix in, rec, out;
};

/// Signs from the Dale vectors where present, otherwise from the sign of each
/// weight (random for zero weights).
inline SynapseSigns synapse_signs(const NetworkParams& p, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  auto from = [&](const Matrix& w, const std::optional<Vector>& cols) {
    Matrix s(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.cols(); ++i)
      for (Eigen::Index j = 0; j < w.rows(); ++j) {
        if (cols)
          s(j, i) = (*cols)[i];
        else if (w(j, i) != 0.0)
          s(j, i) = w(j, i) > 0.0 ? 1.0 : -1.0;
        else
          s(j, i) = coin(rng) ? 1.0 : -1.0;
      }
    return s;
  };
  return {from(p.w_in, p.in_signs), from(p.w_rec, p.rec_signs), from(p.w_out, p.rec_signs)};
}

struct RewireStats {
  int dormant = 0;
  int reactivated = 0;
};

namespace detail {

struct RewireTarget {
  const char* name;
  Matrix* w;
  Matrix* mask;
  Matrix* sign;
  const Matrix* grad;
  bool rewired;
  bool no_diagonal;
  bool dale;  // sign fixed by the presynaptic neuron
  std::vector<Eigen::Index> fresh_dormant;
};

}  // namespace detail

/// One DEEP R update on W_in, W_rec and W_out. The optimizer step (Adam when
/// given, plain gradient descent otherwise), the L1 shrinkage and the
/// temperature noise form a candidate; active weights whose candidate crosses
/// zero against their sign become dormant, and as many dormant coordinates
/// are reactivated at magnitude 0. Calls adam->begin_step() itself.
inline RewireStats deepr_step(NetworkParams& p, const Gradients& g, const RewireConfig& cfg, double lr,
                              std::mt19937_64& rng, Adam* adam, SynapseSigns& signs) {
  cfg.validate();
  std::vector<detail::RewireTarget> targets = {
      {"w_in", &p.w_in, &p.mask_in, &signs.in, &g.w_in, cfg.rewire_in, false, p.in_signs.has_value(), {}},
      {"w_rec", &p.w_rec, &p.mask_rec, &signs.rec, &g.w_rec, cfg.rewire_rec, true, p.rec_signs.has_value(), {}},
      {"w_out", &p.w_out, &p.mask_out, &signs.out, &g.w_out, cfg.rewire_out, false, p.rec_signs.has_value(), {}},
  };
  if (adam) adam->begin_step();
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noise_std = std::sqrt(2.0 * lr * cfg.temperature);
  RewireStats stats;
  std::vector<double> delta;
  for (auto& tg : targets) {
    Matrix& w = *tg.w;
    const Matrix& mask = *tg.mask;
    if (tg.grad->rows() != w.rows() || tg.grad->cols() != w.cols())
      throw ConfigError(std::string("deepr_step: gradient shape mismatch for ") + tg.name);
    if (tg.sign->rows() != w.rows() || tg.sign->cols() != w.cols())
      throw ConfigError(std::string("deepr_step: sign shape mismatch for ") + tg.name);
    delta.assign(static_cast<std::size_t>(w.size()), 0.0);
    if (adam) {
      adam->direction({tg.name, flat(w), flat(*tg.grad), flat(mask)}, lr, delta);
    } else {
      for (Eigen::Index k = 0; k < w.size(); ++k)
        if (mask.data()[k] != 0.0) delta[k] = -lr * tg.grad->data()[k];
    }
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      if (mask.data()[k] == 0.0) continue;
      double candidate = w.data()[k] + delta[k];
      if (tg.rewired) {
        const double s = tg.sign->data()[k];
        candidate -= lr * cfg.l1_coeff * s;
        if (noise_std > 0.0) candidate += noise_std * normal(rng);
        if (candidate * s < 0.0) {
          w.data()[k] = 0.0;
          tg.mask->data()[k] = 0.0;
          tg.fresh_dormant.push_back(k);
          ++stats.dormant;
          continue;
        }
      }
      w.data()[k] = candidate;
    }
  }

  // Reactivation: uniform over dormant coordinates of the same matrix, or of
  // every rewired matrix under the global budget.
  std::bernoulli_distribution coin(0.5);
  auto activate = [&](detail::RewireTarget& tg, Eigen::Index k) {
    tg.mask->data()[k] = 1.0;
    tg.w->data()[k] = 0.0;
    if (!tg.dale) tg.sign->data()[k] = coin(rng) ? 1.0 : -1.0;
    if (adam) adam->reset(tg.name, static_cast<std::size_t>(k));
    ++stats.reactivated;
  };
  auto dormant_of = [](const detail::RewireTarget& tg) {
    std::vector<Eigen::Index> out;
    const Matrix& mask = *tg.mask;
    for (Eigen::Index k = 0; k < mask.size(); ++k) {
      if (mask.data()[k] != 0.0) continue;
      if (tg.no_diagonal && k / mask.rows() == k % mask.rows()) continue;
      out.push_back(k);
    }
    return out;
  };
  auto choose = [&](std::size_t pool, std::size_t count) {
    if (count > pool) throw InvariantError("deepr_step: not enough dormant coordinates to reactivate");
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t k = 0; k < count; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool - 1);
      std::swap(idx[k], idx[pick(rng)]);
    }
    idx.resize(count);
    return idx;
  };

  if (cfg.budget == RewireBudget::per_matrix) {
    for (auto& tg : targets) {
      if (tg.fresh_dormant.empty()) continue;
      const auto pool = dormant_of(tg);
      for (std::size_t k : choose(pool.size(), tg.fresh_dormant.size())) activate(tg, pool[k]);
    }
  } else if (stats.dormant > 0) {
    std::vector<std::pair<std::size_t, Eigen::Index>> pool;
    for (std::size_t m = 0; m < targets.size(); ++m) {
      if (!targets[m].rewired) continue;
      for (Eigen::Index k : dormant_of(targets[m])) pool.emplace_back(m, k);
    }
    for (std::size_t k : choose(pool.size(), static_cast<std::size_t>(stats.dormant)))
      activate(targets[pool[k].first], pool[k].second);
  }
  return stats;
}

/// Number of active (mask != 0) synapses across the three weight matrices.
inline long active_synapses(const NetworkParams& p) {
  return static_cast<long>((p.mask_in.array() != 0.0).count() + (p.mask_rec.array() != 0.0).count() +
                           (p.mask_out.array() != 0.0).count());
}

/// Full parameter update for one iteration: weights through DEEP R (when
/// `rewire` is set) or masked Adam with sign clipping under Dale's law, plus the noise amplitudes when trained
/// (kept non-negative).
inline RewireStats update_network(NetworkParams& p, const Gradients& g, double lr, Adam& adam,
                                  const RewireConfig* rewire, SynapseSigns* signs, std::mt19937_64& rng,
                                  bool train_noise = false) {
  RewireStats stats;
  if (rewire) {
    if (!signs) throw ConfigError("update_network: rewiring needs synapse signs");
    stats = deepr_step(p, g, *rewire, lr, rng, &adam, *signs);
  } else {
    adam.begin_step();
    std::vector<double> delta;
    auto apply = [&](const char* name, Matrix& w, const Matrix& grad, const Matrix& mask) {
      delta.assign(static_cast<std::size_t>(w.size()), 0.0);
      adam.direction({name, flat(w), flat(grad), flat(mask)}, lr, delta);
      for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] += delta[k];
    };
    apply("w_in", p.w_in, g.w_in, p.mask_in);
    apply("w_rec", p.w_rec, g.w_rec, p.mask_rec);
    apply("w_out", p.w_out, g.w_out, p.mask_out);
    // Without rewiring, Dale columns are kept by clipping sign flips to zero.
    auto clip = [](Matrix& w, const std::optional<Vector>& cols) {
      if (!cols) return;
      for (Eigen::Index i = 0; i < w.cols(); ++i)
        for (Eigen::Index j = 0; j < w.rows(); ++j)
          if (w(j, i) * (*cols)[i] < 0.0) w(j, i) = 0.0;
    };
    clip(p.w_in, p.in_signs);
    clip(p.w_rec, p.rec_signs);
    clip(p.w_out, p.rec_signs);
  }
  if (train_noise && p.has_noise()) {
    if (g.noise_sigma.size() != p.noise_sigma.size()) throw ConfigError("update_network: missing noise gradient");
    std::vector<double> delta(static_cast<std::size_t>(p.noise_sigma.size()));
    adam.direction({"noise_sigma", flat(p.noise_sigma), flat(g.noise_sigma), {}}, lr, delta);
    for (Eigen::Index k = 0; k < p.noise_sigma.size(); ++k)
      p.noise_sigma[k] = std::max(0.0, p.noise_sigma[k] + delta[k]);
  }
  return stats;
}

}  // namespace lsnn
