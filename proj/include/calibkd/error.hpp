#pragma once

#include <stdexcept>
#include <string>

namespace calibkd {

/// Base class of every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyper-parameters, specs or option combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a computation, failed factorizations.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dataset content problems (labels out of range, empty classes).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed files: IDX, CSV, checkpoints, metric tables.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Verification oracle detected that its own assumptions do not hold.
class OracleError : public Error {
 public:
  using Error::Error;
};

}  // namespace calibkd
