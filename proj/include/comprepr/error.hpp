#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace comprepr {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not line up; the message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index is outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A vector norm fell below the normalization guard.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where finite arithmetic was required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The synthetic generator cannot realize the requested configuration.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// A hierarchy annotation is missing a required answer.
class AnnotationError : public Error {
 public:
  using Error::Error;
};

/// A file could not be parsed; carries the offending line number (1-based, 0 if unknown).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::int64_t line)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::int64_t line() const { return line_; }

 private:
  std::int64_t line_;
};

/// A file declares an unsupported format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// Filesystem-level failure (open, read, write, rename).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid or unknown configuration content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace comprepr
