#pragma once

#include <stdexcept>
#include <string>

namespace dirgap {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EncodingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or an empty loss target.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A masked loss with no target positions.
struct EmptyTargetError : NumericError {
  using NumericError::NumericError;
};

// Tape misuse, e.g. backward() without a recorded forward pass.
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dirgap
