#pragma once

#include <stdexcept>
#include <string>

namespace kdstage {

// Root of every error raised by the library. The CLI maps subclasses to exit
// codes (see tools/cli.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes; the message names the operation and shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf was produced or a value left its mathematical domain.
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data: bad magic, truncation, manifest/file mismatch.
class CorruptDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace kdstage
