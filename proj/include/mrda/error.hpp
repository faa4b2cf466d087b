#pragma once

#include <stdexcept>
#include <string>

namespace mrda {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid arguments, configuration or schema (usage problems).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or unsuitable input data discovered while running.
class DataError : public Error {
 public:
  using Error::Error;
};

// Numerical failure inside a solver.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mrda
