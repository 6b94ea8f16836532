#pragma once

#include <stdexcept>
#include <string>

namespace sbir {

// Base type for every error raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed run configuration, unusable user input, or a file that cannot
// be loaded. The CLI maps this to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// A strict-mode request asked for a guarantee the chosen inference family
// cannot provide (e.g. a normalized density from a likelihood posterior).
// The CLI maps this to exit code 3.
struct StrictModeError : Error {
  using Error::Error;
};

// Non-finite values or violated numeric preconditions inside a computation.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace sbir
