#pragma once

#include <stdexcept>
#include <string>

namespace poseroi {

/// Base class for every error raised by the library. The category maps onto
/// the CLI exit codes (config 2, data 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not conform to an operator's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable input data (annotation files, images, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace poseroi
