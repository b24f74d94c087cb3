#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace protodiff {

// Base of every error raised by the library. The CLI maps subclasses to
// process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed, or a matrix outside its numeric domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Violated precondition on an argument.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Index or count outside the valid range.
class BoundsError : public Error {
 public:
  using Error::Error;
};

// Metric has no defined value on the given input (e.g. one class only).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Statistical test has no information (e.g. every paired difference is zero).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage is missing an artifact produced by an earlier stage.
class DependencyError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename E = ContractError>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace detail
}  // namespace protodiff
