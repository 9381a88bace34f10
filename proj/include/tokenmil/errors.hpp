#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tokenmil {

/// Malformed or invariant-violating input data (manifests, bags, checkpoints, configs).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numeric argument outside the domain of a function (e.g. a probability <= 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite loss during optimisation.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::ptrdiff_t last_good_step)
      : std::runtime_error(what), last_good_step_(last_good_step) {}

  /// Index of the last step whose loss was finite, or -1 if none.
  std::ptrdiff_t last_good_step() const noexcept { return last_good_step_; }

 private:
  std::ptrdiff_t last_good_step_;
};

/// Failure reported by an external service (entailment oracle).
class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tokenmil
