#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace inspect {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input violates an operation precondition (NaN pixel, wrong shape, empty batch).
class RejectedInput : public Error {
 public:
  using Error::Error;
};

// Misconfiguration: window larger than image, empty training set, bad ranges.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Internal shape or bookkeeping inconsistency between related values.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class RoiOutOfBounds : public Error {
 public:
  using Error::Error;
};

// Corrupt or truncated file; carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ProtocolViolation : public Error {
 public:
  using Error::Error;
};

class LedgerError : public Error {
 public:
  using Error::Error;
};

// Decision refers to a sample that is not pending review.
class UnknownSample : public LedgerError {
 public:
  using LedgerError::LedgerError;
};

class MalformedDecision : public Error {
 public:
  using Error::Error;
};

class ExpansionError : public Error {
 public:
  using Error::Error;
};

}  // namespace inspect
