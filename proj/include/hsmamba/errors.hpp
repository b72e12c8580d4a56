#pragma once

#include <stdexcept>
#include <string>

namespace hsmamba {

// Library-wide error taxonomy. Everything thrown on purpose derives from Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };    // mismatched extents
struct ParamError : Error { using Error::Error; };    // invalid argument to an op
struct ConfigError : Error { using Error::Error; };   // bad model / CLI configuration
struct ModeError : Error { using Error::Error; };     // op invoked in an unsupported mode
struct NumericError : Error { using Error::Error; };  // NaN/Inf surfaced in a computation
struct IoError : Error { using Error::Error; };       // file format problems
struct SplitError : Error { using Error::Error; };    // dataset splitting failures

}  // namespace hsmamba
