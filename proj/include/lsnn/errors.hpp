#pragma once

#include <stdexcept>
#include <string>

namespace lsnn {

/// Invalid parameters, shapes or configuration values.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A state or gradient became non-finite during simulation or BPTT.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& what, int step, int index)
      : std::runtime_error(what), step(step), index(index) {}
  int step;
  int index;
};

/// File access or parse failure. The message names the path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A structural invariant was violated at runtime (e.g. no dormant slot left
/// for rewiring, or a re-simulation that does not reproduce its rollout).
struct InvariantError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace lsnn
