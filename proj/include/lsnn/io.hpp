#pragma once

// Experiment configuration (JSON key tree with `--set` overrides), binary
// checkpoints, CSV exports and the experiment runner.

#include <zlib.h>

#include <Eigen/Dense>
#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lsnn/dataset.hpp"
#include "lsnn/errors.hpp"
#include "lsnn/rl_meta.hpp"
#include "lsnn/tasks_supervised.hpp"
#include "lsnn/training.hpp"

namespace lsnn {

// ---------------------------------------------------------------------------
// Configuration

struct ExportConfig {
  bool raster = true;
  bool readout = true;
  bool trajectory = true;
  int trajectory_episodes = 3;
};

struct EvalConfig {
  int rl_episodes = 100;
  int random_episodes = 1000;
};

struct ExperimentConfig {
  std::string task = "delayed-cue";  // delayed-cue | seq-pixel | l2l-sinus | l2l-tn | meta-rl
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  NetworkConfig network;
  TrainConfig train;
  DelayedCueConfig cue;
  SeqPixelConfig pixels;
  L2LConfig l2l;
  ArenaConfig arena;
  PPOConfig ppo;
  EvalConfig eval;
  ExportConfig exports;

  bool is_l2l() const { return task == "l2l-sinus" || task == "l2l-tn"; }

  /// Throws one ConfigError listing every problem found.
  void validate() const {
    std::vector<std::string> bad;
    if (task != "delayed-cue" && task != "seq-pixel" && task != "l2l-sinus" && task != "l2l-tn" && task != "meta-rl")
      bad.push_back("task must be one of delayed-cue, seq-pixel, l2l-sinus, l2l-tn, meta-rl");
    if (output_dir.empty()) bad.push_back("output_dir must not be empty");
    if (eval.rl_episodes < 1 || eval.random_episodes < 1) bad.push_back("eval: episode counts must be >= 1");
    if (exports.trajectory_episodes < 0) bad.push_back("exports.trajectory_episodes must be >= 0");
    auto collect = [&](auto&& f) {
      try {
        f();
      } catch (const ConfigError& e) {
        bad.emplace_back(e.what());
      }
    };
    collect([&] { network.validate(); });
    collect([&] { train.validate(); });
    collect([&] { cue.validate(); });
    collect([&] { pixels.validate(); });
    collect([&] { l2l.validate(); });
    collect([&] { arena.validate(); });
    collect([&] { ppo.validate(); });
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      throw ConfigError(msg);
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NetworkConfig, n_regular, n_adaptive, n_inhibitory, tau_m, tau_m_max,
                                                tau_a, tau_a_max, beta, b0, refractory, dt, tau_out, delay_in_min,
                                                delay_in_max, delay_rec_min, delay_rec_max, init, w0,
                                                input_frac_excitatory, connectivity, rewire, rewire_budget, l1,
                                                temperature, noise_sigma, readout_scale)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, iterations, batch_size, lr, lr_decay, lr_interval,
                                                adam_beta1, adam_beta2, adam_eps, amsgrad, gamma, reset_gradient,
                                                rate_target_hz, rate_coeff, rate_unit, log_every, checkpoint_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DelayedCueConfig, n_per_group, cue_rate_hz, cue_ms, delay_ms,
                                                recall_ms, recall_rate_hz, test_trials)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetSource, path, kind, labels_path, max_value)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SeqPixelConfig, train_data, test_data, n_train, n_test, downsample,
                                                encoding, n_thresholds, n_rate_neurons, pixel_ms, readout_window,
                                                cue_neuron, eval_every, eval_subset)
// The function family follows from the task name.
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(L2LConfig, n_steps, step_ms, neurons_per_dim, r_max_hz,
                                                sigma_fraction, test_episodes, ridge_reg, ridge_train_fraction,
                                                trace_tau_ms, trace_width_ms)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ArenaConfig, arena_radius, goal_radius, goal_center_radius, a_scale,
                                                goal_reward, wall_penalty, steps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PPOConfig, clip, discount, mu_v, mu_e, mu_firing, f0_hz, episodes,
                                                variance_mode, position_neurons, position_rate_hz, reward_neurons,
                                                verify_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, rl_episodes, random_episodes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExportConfig, raster, readout, trajectory, trajectory_episodes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, task, seed, output_dir, network, train, cue, pixels,
                                                l2l, arena, ppo, eval, exports)

namespace detail {

inline void unknown_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix,
                         std::vector<std::string>& out) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) {
      out.push_back("unknown key '" + path + "'");
      continue;
    }
    const auto& k = known.at(it.key());
    if (k.is_object()) {
      if (!it.value().is_object())
        out.push_back("key '" + path + "' must be an object");
      else
        unknown_keys(it.value(), k, path, out);
    }
  }
}

/// Value text of a `--set` override: JSON when it parses, a plain string otherwise.
inline nlohmann::json override_value(const std::string& text) {
  auto v = nlohmann::json::parse(text, nullptr, false);
  if (v.is_discarded()) return text;
  return v;
}

}  // namespace detail

/// Applies `path.to.key=value` to a JSON tree.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string path = assignment.substr(0, eq);
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (dot == std::string::npos) {
      (*node)[key] = detail::override_value(assignment.substr(eq + 1));
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

/// Parses, checks for unknown keys, converts and validates a configuration.
inline ExperimentConfig parse_config(nlohmann::json j, const std::vector<std::string>& overrides = {}) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  for (const auto& o : overrides) apply_override(j, o);
  std::vector<std::string> problems;
  detail::unknown_keys(j, nlohmann::json(ExperimentConfig{}), "", problems);
  if (!problems.empty()) {
    std::string msg;
    for (const auto& p : problems) msg += (msg.empty() ? "" : "; ") + p;
    throw ConfigError(msg);
  }
  ExperimentConfig cfg;
  try {
    cfg = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("configuration type error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("configuration is not valid JSON");
  return parse_config(std::move(j), overrides);
}

/// Reads a configuration file. Relative dataset paths are resolved against
/// the file's directory.
inline ExperimentConfig load_config_file(const std::filesystem::path& path,
                                         const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open configuration file: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  auto cfg = parse_config_text(ss.str(), overrides);
  const auto base = std::filesystem::absolute(path).parent_path();
  for (auto* p : {&cfg.pixels.train_data.path, &cfg.pixels.train_data.labels_path, &cfg.pixels.test_data.path,
                  &cfg.pixels.test_data.labels_path})
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return cfg;
}

inline std::string config_text(const ExperimentConfig& cfg) { return nlohmann::json(cfg).dump(2); }

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'L', 'S', 'N', 'N', 'C', 'K', 'P', 'T'};

/// Named array of a checkpoint container.
struct Record {
  enum Kind : std::uint8_t { f64 = 1, i32 = 2, bytes = 3, i64 = 4 };
  Kind kind = f64;
  std::uint64_t rows = 0, cols = 0;
  std::vector<double> f;
  std::vector<std::int32_t> i;
  std::string text;
  std::int64_t scalar = 0;
};

using Container = std::map<std::string, Record>;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) u8(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) u8(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out_ += s;
  }
  std::string& data() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& d, std::size_t end, const std::string& path) : d_(d), end_(end), path_(path) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(d_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(u8()) << (8 * k);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(u8()) << (8 * k);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw IoError(path_ + ": truncated record at byte offset " + std::to_string(pos_));
  }
  const std::string& d_;
  std::size_t end_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc(const std::string& d, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(d.data()), static_cast<uInt>(n)));
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Layout: magic, u32 version, u64 record count, records, u32 CRC32 of all
/// preceding bytes. Integers little-endian; doubles as IEEE-754 bit patterns.
inline std::string encode_container(const Container& c, std::uint32_t version = kCheckpointVersion) {
  detail::ByteWriter w;
  for (char ch : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(ch));
  w.u32(version);
  w.u64(c.size());
  for (const auto& [name, r] : c) {
    w.str(name);
    w.u8(r.kind);
    switch (r.kind) {
      case Record::f64:
        w.u64(r.rows);
        w.u64(r.cols);
        for (double v : r.f) w.f64(v);
        break;
      case Record::i32:
        w.u64(r.rows);
        w.u64(r.cols);
        for (auto v : r.i) w.u32(static_cast<std::uint32_t>(v));
        break;
      case Record::bytes:
        w.str(r.text);
        break;
      case Record::i64:
        w.u64(static_cast<std::uint64_t>(r.scalar));
        break;
    }
  }
  w.u32(detail::crc(w.data(), w.data().size()));
  return w.data();
}

inline Container decode_container(const std::string& d, const std::string& path) {
  if (d.size() < sizeof kCheckpointMagic + 4 + 8 + 4) throw IoError(path + ": checksum error (file too short)");
  if (d.compare(0, sizeof kCheckpointMagic, std::string(kCheckpointMagic, sizeof kCheckpointMagic)) != 0)
    throw IoError(path + ": not a checkpoint (bad magic)");
  const std::size_t body = d.size() - 4;
  detail::ByteReader tail(d, d.size(), path);
  tail.seek(body);
  if (tail.u32() != detail::crc(d, body)) throw IoError(path + ": checksum error");
  detail::ByteReader r(d, body, path);
  r.seek(sizeof kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError(path + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  const auto count = r.u64();
  Container c;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.str();
    Record rec;
    const auto kind = r.u8();
    switch (kind) {
      case Record::f64:
      case Record::i32: {
        rec.kind = static_cast<Record::Kind>(kind);
        rec.rows = r.u64();
        rec.cols = r.u64();
        if (rec.cols != 0 && rec.rows > (body - r.pos()) / rec.cols)
          throw IoError(path + ": record '" + name + "' exceeds the file");
        const auto n = rec.rows * rec.cols;
        if (kind == Record::f64) {
          rec.f.resize(n);
          for (auto& v : rec.f) v = r.f64();
        } else {
          rec.i.resize(n);
          for (auto& v : rec.i) v = static_cast<std::int32_t>(r.u32());
        }
        break;
      }
      case Record::bytes:
        rec.kind = Record::bytes;
        rec.text = r.str();
        break;
      case Record::i64:
        rec.kind = Record::i64;
        rec.scalar = static_cast<std::int64_t>(r.u64());
        break;
      default:
        throw IoError(path + ": unknown record kind at byte offset " + std::to_string(r.pos() - 1));
    }
    c.emplace(name, std::move(rec));
  }
  if (r.pos() != body) throw IoError(path + ": trailing bytes before checksum");
  return c;
}

namespace detail {

inline Record put(const Matrix& m) {
  Record r;
  r.kind = Record::f64;
  r.rows = static_cast<std::uint64_t>(m.rows());
  r.cols = static_cast<std::uint64_t>(m.cols());
  r.f.assign(m.data(), m.data() + m.size());
  return r;
}

inline Record put(const IntMatrix& m) {
  Record r;
  r.kind = Record::i32;
  r.rows = static_cast<std::uint64_t>(m.rows());
  r.cols = static_cast<std::uint64_t>(m.cols());
  r.i.assign(m.data(), m.data() + m.size());
  return r;
}

inline Record put_text(std::string s) {
  Record r;
  r.kind = Record::bytes;
  r.text = std::move(s);
  return r;
}

inline Record put_int(std::int64_t v) {
  Record r;
  r.kind = Record::i64;
  r.scalar = v;
  return r;
}

inline const Record& get(const Container& c, const std::string& name, Record::Kind kind) {
  auto it = c.find(name);
  if (it == c.end()) throw IoError("checkpoint is missing record '" + name + "'");
  if (it->second.kind != kind) throw IoError("checkpoint record '" + name + "' has the wrong kind");
  return it->second;
}

inline Matrix get_matrix(const Container& c, const std::string& name) {
  const auto& r = get(c, name, Record::f64);
  Matrix m(static_cast<Eigen::Index>(r.rows), static_cast<Eigen::Index>(r.cols));
  std::copy(r.f.begin(), r.f.end(), m.data());
  return m;
}

inline IntMatrix get_int_matrix(const Container& c, const std::string& name) {
  const auto& r = get(c, name, Record::i32);
  IntMatrix m(static_cast<Eigen::Index>(r.rows), static_cast<Eigen::Index>(r.cols));
  std::copy(r.i.begin(), r.i.end(), m.data());
  return m;
}

}  // namespace detail

struct Checkpoint {
  std::string config;  // effective configuration as JSON text
  TrainState state;
};

inline Container checkpoint_container(const std::string& config, const TrainState& s) {
  using detail::put;
  const auto& p = s.params;
  Container c;
  c["config"] = detail::put_text(config);
  c["iteration"] = detail::put_int(s.iteration);
  std::ostringstream rng;
  rng << s.rng;
  c["rng"] = detail::put_text(rng.str());
  c["net.w_in"] = put(p.w_in);
  c["net.w_rec"] = put(p.w_rec);
  c["net.w_out"] = put(p.w_out);
  c["net.delay_in"] = put(p.delay_in);
  c["net.delay_rec"] = put(p.delay_rec);
  c["net.mask_in"] = put(p.mask_in);
  c["net.mask_rec"] = put(p.mask_rec);
  c["net.mask_out"] = put(p.mask_out);
  if (p.rec_signs) c["net.rec_signs"] = put(Matrix(*p.rec_signs));
  if (p.in_signs) c["net.in_signs"] = put(Matrix(*p.in_signs));
  Matrix neurons(p.n_rec(), 5);
  for (int j = 0; j < p.n_rec(); ++j) {
    const auto& n = p.neurons[j];
    neurons.row(j) << n.tau_m, n.tau_a, n.beta, n.b0, n.refractory;
  }
  c["net.neurons"] = put(neurons);
  Matrix scalars(2, 1);
  scalars << p.tau_out, p.dt;
  c["net.scalars"] = put(scalars);
  c["net.noise_sigma"] = put(Matrix(p.noise_sigma));
  const auto& ac = s.adam.config();
  Matrix adam_cfg(5, 1);
  adam_cfg << ac.beta1, ac.beta2, ac.eps, ac.amsgrad ? 1.0 : 0.0, ac.weight_decay;
  c["adam.config"] = put(adam_cfg);
  c["adam.steps"] = detail::put_int(s.adam.steps());
  for (const auto& [name, slot] : s.adam.slots()) {
    c["adam.slot." + name + ".m"] = put(Matrix(slot.m));
    c["adam.slot." + name + ".v"] = put(Matrix(slot.v));
    c["adam.slot." + name + ".vmax"] = put(Matrix(slot.vmax));
  }
  if (s.signs) {
    c["signs.in"] = put(s.signs->in);
    c["signs.rec"] = put(s.signs->rec);
    c["signs.out"] = put(s.signs->out);
  }
  return c;
}

inline Checkpoint checkpoint_from_container(const Container& c) {
  using detail::get_matrix;
  Checkpoint ck;
  ck.config = detail::get(c, "config", Record::bytes).text;
  auto& s = ck.state;
  s.iteration = detail::get(c, "iteration", Record::i64).scalar;
  std::istringstream rng(detail::get(c, "rng", Record::bytes).text);
  rng >> s.rng;
  if (!rng) throw IoError("checkpoint rng state is malformed");
  auto& p = s.params;
  p.w_in = get_matrix(c, "net.w_in");
  p.w_rec = get_matrix(c, "net.w_rec");
  p.w_out = get_matrix(c, "net.w_out");
  p.delay_in = detail::get_int_matrix(c, "net.delay_in");
  p.delay_rec = detail::get_int_matrix(c, "net.delay_rec");
  p.mask_in = get_matrix(c, "net.mask_in");
  p.mask_rec = get_matrix(c, "net.mask_rec");
  p.mask_out = get_matrix(c, "net.mask_out");
  if (c.count("net.rec_signs")) p.rec_signs = Vector(get_matrix(c, "net.rec_signs"));
  if (c.count("net.in_signs")) p.in_signs = Vector(get_matrix(c, "net.in_signs"));
  const Matrix neurons = get_matrix(c, "net.neurons");
  if (neurons.cols() != 5) throw IoError("checkpoint neuron table has the wrong shape");
  for (Eigen::Index j = 0; j < neurons.rows(); ++j)
    p.neurons.push_back({neurons(j, 0), neurons(j, 1), neurons(j, 2), neurons(j, 3), neurons(j, 4)});
  const Matrix scalars = get_matrix(c, "net.scalars");
  if (scalars.size() != 2) throw IoError("checkpoint network scalars have the wrong shape");
  p.tau_out = scalars(0);
  p.dt = scalars(1);
  const Matrix noise = get_matrix(c, "net.noise_sigma");
  p.noise_sigma = noise.size() > 0 ? Vector(noise) : Vector();
  p.validate();

  const Matrix ac = get_matrix(c, "adam.config");
  if (ac.size() != 5) throw IoError("checkpoint Adam configuration has the wrong shape");
  s.adam = Adam(AdamConfig{ac(0), ac(1), ac(2), ac(3) != 0.0, ac(4)});
  std::map<std::string, Adam::Slot> slots;
  const std::string prefix = "adam.slot.";
  for (const auto& [name, rec] : c) {
    if (name.rfind(prefix, 0) != 0 || name.size() < prefix.size() + 2 || name.substr(name.size() - 2) != ".m")
      continue;
    const std::string slot = name.substr(prefix.size(), name.size() - prefix.size() - 2);
    Adam::Slot sl;
    sl.m = get_matrix(c, name);
    sl.v = get_matrix(c, prefix + slot + ".v");
    sl.vmax = get_matrix(c, prefix + slot + ".vmax");
    slots.emplace(slot, std::move(sl));
  }
  s.adam.restore(detail::get(c, "adam.steps", Record::i64).scalar, std::move(slots));
  if (c.count("signs.rec"))
    s.signs = SynapseSigns{get_matrix(c, "signs.in"), get_matrix(c, "signs.rec"), get_matrix(c, "signs.out")};
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const std::string& config, const TrainState& s) {
  detail::write_file_atomic(path, encode_container(checkpoint_container(config, s)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(decode_container(detail::read_file(path), path.string()));
}

// ---------------------------------------------------------------------------
// CSV exports

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Append-only CSV; the header is written when the file is new or empty.
class CsvAppender {
 public:
  CsvAppender(const std::filesystem::path& path, const std::string& header) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    f_.open(path, std::ios::app);
    if (!f_) throw IoError("cannot open " + path.string() + " for appending");
    if (fresh) f_ << header << '\n' << std::flush;
  }

  void row(const std::vector<double>& values) {
    for (std::size_t k = 0; k < values.size(); ++k) f_ << (k ? "," : "") << format_number(values[k]);
    f_ << '\n' << std::flush;
    if (!f_) throw IoError("write to metrics file failed");
  }

 private:
  std::ofstream f_;
};

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

/// `t_ms,neuron_id`, one row per spike.
inline void write_raster_csv(const std::filesystem::path& path, const Trace& raster, double dt_ms = 1.0) {
  auto f = open_output(path);
  f << "t_ms,neuron_id\n";
  for (Eigen::Index t = 0; t < raster.rows(); ++t)
    for (Eigen::Index j = 0; j < raster.cols(); ++j)
      if (raster(t, j) != 0.0) f << format_number(t * dt_ms) << ',' << j << '\n';
}

/// `t_ms,out_0,...`, one row per step.
inline void write_readout_csv(const std::filesystem::path& path, const Trace& readout, double dt_ms = 1.0) {
  auto f = open_output(path);
  f << "t_ms";
  for (Eigen::Index k = 0; k < readout.cols(); ++k) f << ",out_" << k;
  f << '\n';
  for (Eigen::Index t = 0; t < readout.rows(); ++t) {
    f << format_number(t * dt_ms);
    for (Eigen::Index k = 0; k < readout.cols(); ++k) f << ',' << format_number(readout(t, k));
    f << '\n';
  }
}

/// `episode,t_ms,x,y,reward`: position when each action was taken and the reward it earned.
inline void write_trajectory_csv(const std::filesystem::path& path, const std::vector<Rollout>& rollouts,
                                 double dt_ms = 1.0) {
  auto f = open_output(path);
  f << "episode,t_ms,x,y,reward\n";
  for (std::size_t e = 0; e < rollouts.size(); ++e)
    for (int t = 0; t < rollouts[e].steps(); ++t)
      f << e << ',' << format_number(t * dt_ms) << ',' << format_number(rollouts[e].positions[t].x) << ','
        << format_number(rollouts[e].positions[t].y) << ',' << format_number(rollouts[e].rewards[t]) << '\n';
}

/// Numeric CSV matrix (one row per time step); a non-numeric first line is a header.
inline Trace read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string field;
    bool numeric = true;
    while (std::getline(ss, field, ',')) {
      char* end = nullptr;
      const double v = std::strtod(field.c_str(), &end);
      if (field.empty() || *end != '\0') {
        numeric = false;
        break;
      }
      vals.push_back(v);
    }
    if (!numeric) {
      if (line_no == 1) continue;
      throw IoError(path.string() + ": malformed value on line " + std::to_string(line_no));
    }
    if (!rows.empty() && vals.size() != rows[0].size())
      throw IoError(path.string() + ": inconsistent column count on line " + std::to_string(line_no));
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw IoError(path.string() + ": no data rows");
  Trace m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  return m;
}

// ---------------------------------------------------------------------------
// Runner

/// $LSNN_OUTPUT_ROOT/<output_dir> (the current directory when unset);
/// absolute output_dir values are used as they are.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
  const std::filesystem::path dir(cfg.output_dir);
  if (dir.is_absolute()) return dir;
  const char* root = std::getenv("LSNN_OUTPUT_ROOT");
  return (root && *root ? std::filesystem::path(root) : std::filesystem::current_path()) / dir;
}

inline L2LConfig l2l_for_task(const ExperimentConfig& cfg) {
  L2LConfig l = cfg.l2l;
  l.family = cfg.task == "l2l-tn" ? "tn" : "sinus";
  return l;
}

inline int task_inputs(const ExperimentConfig& cfg) {
  if (cfg.task == "delayed-cue") return cfg.cue.n_in();
  if (cfg.task == "seq-pixel") return cfg.pixels.n_in();
  if (cfg.is_l2l()) return l2l_for_task(cfg).n_in();
  return cfg.ppo.n_in();
}

inline int task_outputs(const ExperimentConfig& cfg) {
  if (cfg.task == "delayed-cue") return 2;
  if (cfg.task == "seq-pixel") return 10;
  if (cfg.is_l2l()) return 1;
  return 5;
}

/// Library copy of the configuration with the task-implied settings applied.
inline TrainState fresh_state(const ExperimentConfig& cfg) {
  return make_train_state(cfg.network, cfg.train, task_inputs(cfg), task_outputs(cfg), cfg.seed);
}

struct RunOptions {
  std::ostream* log = &std::cerr;
  bool quiet = false;
};

/// Runs (or continues) the configured experiment in `out`: metrics.csv,
/// checkpoint.bin, config.json, summary.json and the requested exports.
/// On divergence the last good state is saved to diverged.bin and the error
/// is rethrown.
inline nlohmann::json run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                     std::optional<TrainState> resume = std::nullopt, const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(out);
  const std::string text = config_text(cfg);
  {
    auto f = open_output(out / "config.json");
    f << text << '\n';
  }
  TrainState s = resume ? std::move(*resume) : fresh_state(cfg);
  if (s.params.n_in() != task_inputs(cfg) || s.params.n_out() != task_outputs(cfg))
    throw ConfigError("checkpoint network shape does not match the configured task");
  TrainState last_good = s;
  const auto log = [&](const std::string& m) {
    if (!opt.quiet && opt.log) *opt.log << m << std::endl;
  };
  const auto save = [&](const TrainState& st) { save_checkpoint(out / "checkpoint.bin", text, st); };

  nlohmann::json summary;
  summary["task"] = cfg.task;
  summary["seed"] = cfg.seed;
  const double dt = s.params.dt;
  std::mt19937_64 eval_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  try {
    if (cfg.task == "meta-rl") {
      CsvAppender metrics(out / "metrics.csv", "iteration,loss,mean_reward,goals,rate_reg");
      RLHooks hooks;
      hooks.metrics = [&](const RLMetricRow& r) {
        metrics.row({static_cast<double>(r.iteration), r.loss, r.mean_reward, r.goals, r.rate_reg});
        last_good = s;
      };
      hooks.checkpoint = save;
      hooks.log = log;
      train_meta_rl(cfg.arena, cfg.ppo, cfg.network, cfg.train, s, hooks);
      std::vector<Rollout> eval;
      double goals = 0.0;
      for (int e = 0; e < cfg.eval.rl_episodes; ++e) {
        auto ro = collect_rollout(s.params, cfg.arena, cfg.ppo, eval_rng);
        goals += ro.goals;
        if (e < std::max(1, cfg.exports.trajectory_episodes)) eval.push_back(std::move(ro));
      }
      summary["goals_per_episode"] = goals / cfg.eval.rl_episodes;
      summary["random_policy_goals"] = random_policy_goals(cfg.arena, cfg.ppo, cfg.eval.random_episodes, eval_rng);
      if (cfg.exports.trajectory && cfg.exports.trajectory_episodes > 0) {
        eval.resize(static_cast<std::size_t>(cfg.exports.trajectory_episodes));
        write_trajectory_csv(out / "trajectory.csv", eval, dt);
      }
      if (cfg.exports.raster) write_raster_csv(out / "raster.csv", eval[0].tape.spikes, dt);
      if (cfg.exports.readout) write_readout_csv(out / "readout.csv", eval[0].tape.readout, dt);
    } else {
      CsvAppender metrics(out / "metrics.csv", "iteration,loss,mse,rate_reg,accuracy");
      TrainHooks hooks;
      hooks.metrics = [&](const MetricRow& r) {
        metrics.row({static_cast<double>(r.iteration), r.loss, r.mse, r.rate_reg, r.accuracy});
        last_good = s;
      };
      hooks.checkpoint = save;
      hooks.log = log;
      Trace example;
      if (cfg.task == "delayed-cue") {
        train_delayed_cue(cfg.cue, cfg.network, cfg.train, s, hooks);
        summary["test_accuracy"] = test_delayed_cue(cfg.cue, s.params, eval_rng);
        example = delayed_cue_input(cfg.cue, 0, eval_rng);
      } else if (cfg.task == "seq-pixel") {
        const auto data = load_pixel_data(cfg.pixels, cfg.seed);
        train_seq_pixel(cfg.pixels, cfg.network, cfg.train, data, s, hooks);
        summary["test_accuracy"] = seq_pixel_accuracy(cfg.pixels, s.params, data.test, 0, eval_rng);
        summary["active_synapses"] = active_synapses(s.params);
        example = encode_pixel_sequence(data.test.images.row(0), cfg.pixels, eval_rng);
      } else {
        const auto l2l = l2l_for_task(cfg);
        train_l2l_outer(l2l, cfg.network, cfg.train, s, hooks);
        const auto ev = evaluate_l2l(l2l, s.params, eval_rng);
        summary["lsnn_test_mse"] = ev.lsnn_mse;
        summary["ridge_test_mse"] = ev.ridge_mse;
        summary["episodes_beating_ridge"] = ev.wins();
        example = ev.episodes[0].spikes;
      }
      if (cfg.exports.raster || cfg.exports.readout) {
        const auto r = simulate(s.params, example, false, eval_rng);
        if (cfg.exports.raster) write_raster_csv(out / "raster.csv", r.raster, dt);
        if (cfg.exports.readout) write_readout_csv(out / "readout.csv", r.readout, dt);
      }
    }
  } catch (const DivergenceError&) {
    save_checkpoint(out / "diverged.bin", text, last_good);
    throw;
  }
  save(s);
  summary["iterations"] = s.iteration;
  auto f = open_output(out / "summary.json");
  f << summary.dump(2) << '\n';
  return summary;
}

}  // namespace lsnn
