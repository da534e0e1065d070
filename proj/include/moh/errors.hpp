#pragma once

#include <stdexcept>

namespace moh {

/// Invalid configuration or incompatible shapes between components.
/// The CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while running an otherwise valid configuration (NaN loss, I/O).
/// The CLI maps it to exit code 3.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace moh
