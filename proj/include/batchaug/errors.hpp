#pragma once

#include <stdexcept>
#include <string>

namespace batchaug {

/// Precondition or shape contract broken by the caller.
struct ContractViolation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Inconsistent experiment or layer configuration (e.g. ghost size not dividing the batch).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Base for dataset ingestion failures.
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IdxFormatError : LoadError {
  using LoadError::LoadError;
};
struct IdxTruncatedError : LoadError {
  using LoadError::LoadError;
};
struct IdxCountMismatch : LoadError {
  using LoadError::LoadError;
};

/// Loss or gradient became non-finite, or loss exploded past the guard.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UndefinedCorrelation : std::domain_error {
  using std::domain_error::domain_error;
};

struct Unsupported : std::logic_error {
  using std::logic_error::logic_error;
};

/// Replicas that must agree bit-for-bit disagree.
struct ConsistencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw ContractViolation(what);
}
inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}
}  // namespace detail

}  // namespace batchaug
