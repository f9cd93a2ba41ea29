#pragma once

#include <stdexcept>
#include <string>

namespace fingerlab {

// Error taxonomy. The CLI maps ConfigError/DataError/IoError to exit code 1
// (user error) and anything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or parameter combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or out-of-range input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition (e.g. step outside the schedule).
class LogicError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace fingerlab
