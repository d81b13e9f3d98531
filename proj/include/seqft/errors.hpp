#pragma once

#include <stdexcept>
#include <string>

namespace seqft {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or image shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition (non-scalar backward,
/// missing gradient, empty buffer, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data (labels out of range, corrupt files).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace seqft
