#pragma once

#include <stdexcept>
#include <string>

namespace unlearn {

// Base of every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed bytes or records: checkpoints, JSONL, corpora.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// API misuse that depends on object state (e.g. a second backward pass).
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace unlearn
