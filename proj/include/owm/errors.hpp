#pragma once

#include <stdexcept>
#include <string>

namespace owm {

/// Mismatched extents, wrong rank, or an indivisible geometry.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameter or option combination.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data that violates a precondition (too few classes, unknown task, ...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-system failure; message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace owm
