#pragma once

#include <stdexcept>
#include <string>

namespace navgen {

// Base of every error raised by the library. The CLI maps ConfigError to
// exit code 2 and everything that comes from input data to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class UnreachableError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public DataError {
 public:
  using DataError::DataError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace navgen
