#pragma once

#include <stdexcept>
#include <string>

namespace abstractnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree, or a dimension is not positive.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A layer or network description is internally inconsistent.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument lies outside its admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Rendering or experiment parameters cannot be satisfied.
class ParamError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked in the wrong state (e.g. backward without forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared in a tensor.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File-system or format failure; the message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace abstractnet
