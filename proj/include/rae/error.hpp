#pragma once

#include <stdexcept>
#include <string>

namespace rae {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/operation shape disagreements.
struct ShapeError : Error {
  using Error::Error;
};

// Violated operation preconditions (empty sets, bad ratios, role misuse...).
struct ContractError : Error {
  using Error::Error;
};

// NaN/Inf produced by a forward operation.
struct NumericsError : Error {
  using Error::Error;
};

// File parsing / serialization problems; message carries file and line context.
struct IoError : Error {
  using Error::Error;
};

// Invalid run configuration; message names the offending field.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace rae
