#pragma once

#include <stdexcept>
#include <string>

namespace rtpp {

/// Bad input data: malformed files, invalid records, violated preconditions on data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values, divergence, failed quadrature.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes that do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace rtpp
