#pragma once

#include <stdexcept>
#include <string>

namespace fsnet {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents or channel counts that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid user configuration (out-of-range fractions, probabilities, P, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A combination the kernels deliberately do not support (e.g. even kernels
// with same padding).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

// Numerical failure: non-finite values, SVD non-convergence, degenerate seeds.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed files on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (non-scalar loss, bad class id).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace fsnet
