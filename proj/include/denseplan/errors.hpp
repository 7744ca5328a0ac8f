#pragma once

#include <stdexcept>
#include <string>

namespace denseplan {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct BoundsError : Error {
  using Error::Error;
};

struct SizeOverflowError : Error {
  using Error::Error;
};

struct CapacityError : Error {
  using Error::Error;
};

struct AccountingError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Malformed external input: dataset files, checkpoints, config files.
struct FormatError : Error {
  using Error::Error;
};

struct LabelError : Error {
  using Error::Error;
};

struct DegenerateBatchError : Error {
  using Error::Error;
};

struct ProtocolError : Error {
  using Error::Error;
};

struct RangeError : Error {
  using Error::Error;
};

// A runtime verification (gradient check, cross-strategy comparison,
// memory prediction) failed.
struct VerifyError : Error {
  using Error::Error;
};

}  // namespace denseplan
