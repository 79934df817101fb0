#pragma once

#include <stdexcept>
#include <string>

namespace cil {

// Error taxonomy: callers catch the base, tests assert on the subtype.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad arguments to an operation (shape mismatch, out-of-range index, ...).
struct InputError : Error {
  using Error::Error;
};

// Invalid experiment configuration, detected before any training starts.
struct ConfigError : Error {
  using Error::Error;
};

// A precondition on mutable run state was violated (class overlap, ...).
struct StateError : Error {
  using Error::Error;
};

// Numerical degeneracy: zero norms, non-positive uncertainty, NaN losses.
struct NumericError : Error {
  using Error::Error;
};

// Metric computation over inconsistent labels/predictions.
struct EvalError : Error {
  using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace cil
