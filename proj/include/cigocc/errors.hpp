#pragma once

#include <stdexcept>
#include <string>

namespace cigocc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes or dimensions between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An operation would produce (or received) a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable input data.
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace cigocc
