#pragma once

#include <stdexcept>
#include <string>

namespace counterfort {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates the invariants of its target type.
/// `field()` names the offending field using dotted config notation.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// A file is truncated, has a bad checksum, or is otherwise malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A file was written by a newer, unsupported format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace counterfort
