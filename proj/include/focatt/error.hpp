#pragma once

#include <stdexcept>
#include <string>

namespace focatt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or network dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or an invalid probability distribution.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A cache or optimizer state does not belong to the object it is used with.
class StateError : public Error {
 public:
  using Error::Error;
};

/// A caller-supplied argument violates a precondition.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked in a configuration that forbids it.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A slide has no tissue patches left after masking.
class EmptySlideError : public Error {
 public:
  using Error::Error;
};

/// A bag lacks the grid coordinates needed to map instances back onto a slide.
class ProvenanceError : public Error {
 public:
  using Error::Error;
};

/// File could not be read, written, or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace focatt
