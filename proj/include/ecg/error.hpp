#pragma once

#include <stdexcept>
#include <string>

namespace ecg {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape algebra violated by an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration or argument (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during training (NaN loss, NaN gradient).
class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { Io, Format, Version, Fingerprint, Shape, Missing, Architecture };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace ecg
