#pragma once

#include <stdexcept>

namespace msmamba {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mismatched or degenerate tensor shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// Argument outside its mathematical domain (e.g. non-positive delta).
struct DomainError : Error {
  using Error::Error;
};

/// Misuse of the autodiff tape (non-scalar loss, consumed graph, ...).
struct GraphError : Error {
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

/// Invalid model/run configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed input data (CSV parsing, checkpoint files).
struct ParseError : Error {
  using Error::Error;
};

}  // namespace msmamba
