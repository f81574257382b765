#pragma once

#include <stdexcept>
#include <string>

namespace mtds {

// Shape or layout mismatch between arguments.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of the operation (s <= 0, nu <= 0, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// A numerical certificate failed (orthogonality residual, singular solve, underflow).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every particle assigned -inf log-likelihood to one task.
struct DegenerateTaskError : NumericalError {
  using NumericalError::NumericalError;
};

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

}  // namespace mtds
