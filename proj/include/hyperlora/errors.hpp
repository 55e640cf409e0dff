#pragma once

#include <stdexcept>
#include <string>

namespace hyperlora {

// Error taxonomy used across the library. All derive from std::runtime_error
// so callers can catch broadly; the CLI maps each type to a machine-readable
// error record.

// Bad user-supplied configuration (unknown enum value, invalid spec, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Arguments violate a documented precondition.
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/schema mismatch between two structured values.
struct StructuralError : std::runtime_error {
  explicit StructuralError(const std::string& msg) : std::runtime_error(msg) {}
};

// Optimization blew up (non-finite loss); carries the offending step.
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& msg, long step)
      : std::runtime_error(msg), step_index(step) {}
  long step_index;
};

// File-format or filesystem problems.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// An operation conflicts with on-disk or in-process state (run directory
// locked, resume without a saved state, ...).
struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hyperlora
