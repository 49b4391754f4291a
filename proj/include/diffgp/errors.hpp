#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace diffgp {

/// Base for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numeric failures: the CLI maps these to exit code 1.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Jitter ladder exhausted; usually an ill-conditioned kernel matrix.
class FactorizationFailure : public NumericError {
 public:
  using NumericError::NumericError;
};

class SingularDiagonal : public NumericError {
 public:
  using NumericError::NumericError;
};

class NonFiniteValue : public NumericError {
 public:
  using NumericError::NumericError;
};

class NonFiniteGradient : public NumericError {
 public:
  using NumericError::NumericError;
};

/// An SDE path left the admissible state region (|x| > 1e6 or NaN).
class NonFiniteState : public NumericError {
 public:
  using NumericError::NumericError;
};

class UnsupportedPrimitive : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : DataError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyDataset : public DataError {
 public:
  using DataError::DataError;
};

/// Invalid user configuration; the CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace diffgp
