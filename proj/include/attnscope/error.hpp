#pragma once

#include <stdexcept>
#include <string>

namespace attnscope {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or ranks do not satisfy an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A user-supplied value (token id, position, vector) is invalid.
class InputError : public Error {
 public:
  using Error::Error;
};

/// An index into a trace (layer, head, row) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Weight archive does not match the configuration.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// A file is truncated or not in the expected format.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnscope
