#pragma once

#include <stdexcept>
#include <string>

namespace mhf {

// Base of every error raised by the library. The CLI maps each family to an
// exit code: validation 2, numerical 3, I/O 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape, dtype or configuration contract violated by the caller.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Malformed document; `field` names the offending member when known.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& msg, std::string field = {})
      : ValidationError(msg), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// NaN/Inf produced or consumed, or a numerical check exceeded its bound.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mhf
