#pragma once

#include <stdexcept>
#include <string>

namespace dkf {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, argument or tensor shape. CLI exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Non-finite value, failed convergence or a violated numeric contract. CLI exit code 2.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File system, parse or serialization failure. CLI exit code 3.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dkf
