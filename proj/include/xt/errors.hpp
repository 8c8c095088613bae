#pragma once

#include <stdexcept>
#include <string>

namespace xt {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (shape mismatch, bad index, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Invalid pipeline or model configuration, detected at construction.
class ConfigError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// The configured activation budget cannot hold a single region's working set.
class UnsatisfiableBudget : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// The memory ledger's live-scalar cap was exceeded (stands in for an
/// out-of-memory failure in memory benches).
class SimulatedOom : public Error {
 public:
  using Error::Error;
};

/// NaN or infinite values where finite numbers are required.
class InvalidNumerics : public Error {
 public:
  using Error::Error;
};

/// Training diverged (loss became non-finite).
class TrainingError : public InvalidNumerics {
 public:
  using InvalidNumerics::InvalidNumerics;
};

/// I/O or file-format failure.
class IoError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace xt
