#pragma once

#include <stdexcept>
#include <string>

namespace mags {

// Invalid shapes, out-of-range parameters, malformed run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data that violates an operation's input contract (non one-hot targets, ...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files: IDX, checkpoints, edge lists, run CSVs.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Iterative numerics that failed to converge.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, double last_gap)
      : std::runtime_error(what), last_gap_(last_gap) {}
  double last_gap() const noexcept { return last_gap_; }

 private:
  double last_gap_;
};

}  // namespace mags
