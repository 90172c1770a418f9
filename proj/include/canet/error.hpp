#pragma once

#include <stdexcept>
#include <string>

namespace canet {

// Root of all library errors. The CLI maps each subclass onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values in a forward pass, loss, or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace canet
