#pragma once

#include <stdexcept>
#include <string>

namespace zapnet {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration or argument (exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered in a forward or backward pass (exit code 2).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// File system or file-format failure (exit code 3).
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Incompatible tensor shapes or out-of-range indices.
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace zapnet
