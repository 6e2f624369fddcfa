#pragma once

#include <stdexcept>
#include <string>

namespace fsqs {

/// Caller handed us inconsistent or malformed inputs (shape mismatches,
/// invalid configuration values, labels out of range).
struct InputError : std::invalid_argument {
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

/// A transport plan collapsed (a row with no mass); the coupling is broken
/// and downstream normalization would divide by zero.
struct DegeneratePlanError : std::runtime_error {
  explicit DegeneratePlanError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values showed up where finite ones are required (diverged
/// training, NaN gradients, infinite costs).
struct NumericsError : std::runtime_error {
  explicit NumericsError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem / serialization failure.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fsqs
