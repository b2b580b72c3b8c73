#pragma once

#include <stdexcept>
#include <string>

namespace sgnas {

// Every failure raised by the library derives from Error so callers can
// catch broadly and still dispatch on the concrete category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents or channel counts disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// An architecture encoding is not a member of its search space.
class ValidityError : public Error {
 public:
  using Error::Error;
};

// Malformed file or text input.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A tabular benchmark is missing rows.
class CompletenessError : public Error {
 public:
  using Error::Error;
};

// A cost constraint cannot be met by any architecture of the space.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or divergence during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace sgnas
