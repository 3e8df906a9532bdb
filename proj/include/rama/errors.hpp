#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rama {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration: unknown task family/variant, out-of-range hyperparameter,
// unparseable config line.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse: wrong shapes, stepping a finished environment, zero batch.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Inconsistent data handed to a container (e.g. action dimension mismatch).
class DataError : public Error {
 public:
  using Error::Error;
};

// Sampling requested from a source holding no qualifying items.
class EmptySourceError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  /// Message without the offset suffix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::uint64_t offset_;
};

// File written by an unsupported format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace rama
