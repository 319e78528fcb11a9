#pragma once

#include <stdexcept>
#include <string>

namespace multirep {

// Configuration and input errors map to CLI exit code 1, numerical
// failures to exit code 2.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EncodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a vector with (near) zero norm reaches a cosine.
class DegenerateVectorError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace multirep
