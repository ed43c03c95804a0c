#pragma once

#include <stdexcept>
#include <string>

namespace abus {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition (shape, extent, divisibility).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An object was used in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Phantom generation could not satisfy its placement constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace abus
