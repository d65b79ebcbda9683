#pragma once

#include <stdexcept>
#include <string>

namespace lungseg {

// Bad argument values, inconsistent geometry, unknown enum strings.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shape preconditions of tensor operations.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Missing files, short reads, unwritable outputs.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lungseg
