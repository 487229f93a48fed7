#pragma once

#include <stdexcept>
#include <string>

namespace tpsalign {

inline constexpr double kPi = 3.14159265358979323846;

// Invalid configuration: bad CLI flags, malformed config files, shape
// mismatches the caller could have avoided. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: singular systems, NaN losses, zero-norm inputs to
// normalization. CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / dataset problems (unreadable manifest, unwritable output).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tpsalign
