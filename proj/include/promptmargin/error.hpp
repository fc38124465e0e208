#pragma once

#include <stdexcept>
#include <string>

namespace pm {

/// Invalid argument or configuration value supplied by a caller.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A bank on disk or in memory violates the PMEB v1 contract.
class BankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The bank cannot satisfy an episode request (too few classes or items).
class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch or malformed numeric input.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A loss term or gradient became non-finite during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pm
