#pragma once

#include <stdexcept>
#include <string>

namespace caplab {

// Shape mismatch between operands or between data and declared shape.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated call contract (non-scalar backward root, bad op wiring, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Index outside its valid range (token ids, rows, targets).
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Rejected configuration value or unparseable config file. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing prerequisite (dataset, checkpoint, prior stage). CLI exit code 3.
struct PreconditionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed dataset record or caption that violates a data invariant.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure while reading or writing artifacts.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every token was masked out by decoding constraints.
struct ConstraintDeadlockError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint magic/version/dims do not match what the caller expects.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace caplab
