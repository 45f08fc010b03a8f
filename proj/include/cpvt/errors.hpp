#pragma once

#include <stdexcept>
#include <string>

namespace cpvt {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree (always reports both shapes in the message).
struct ShapeError : Error {
  using Error::Error;
};

// A documented precondition of an operation was violated.
struct ContractError : Error {
  using Error::Error;
};

// An invalid configuration value (names the offending field).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed user-supplied input (files, sizes, ids).
struct InputError : Error {
  using Error::Error;
};

// A forward pass was requested at a resolution the encoding scheme
// cannot serve without an explicit resize.
struct ResolutionError : Error {
  using Error::Error;
};

// Checkpoint payload does not match its integrity digest.
struct CorruptionError : Error {
  using Error::Error;
};

// Checkpoint format version is not supported.
struct VersionError : Error {
  using Error::Error;
};

// A function expected to be deterministic produced differing outputs.
struct DeterminismError : Error {
  using Error::Error;
};

// Filesystem failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace cpvt
