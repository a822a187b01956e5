#pragma once

#include <stdexcept>
#include <string>

namespace bamrl {

/// Shapes that do not chain, broadcast or fit a kernel.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid user-supplied configuration or parameter.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced during a forward or backward pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or incompatible file (checkpoint, config, report).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API called in the wrong state (e.g. env step after done).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace bamrl
