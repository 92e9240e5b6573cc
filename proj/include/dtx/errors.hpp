#pragma once

#include <stdexcept>
#include <string>

namespace dtx {

// Operand shapes do not fit the operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A value lies outside the mathematical domain of the operation (log of x <= 0).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Caller broke an API precondition (non-scalar loss, double backward, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid model/training configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed data: unknown ids, too-short inputs, bad files.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dtx
