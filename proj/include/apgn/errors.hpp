#pragma once

#include <stdexcept>
#include <string>

namespace apgn {

// Bad user-supplied configuration (dims, ranges, unknown keys).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad runtime input to an operation (shape mismatch, non-finite values, ...).
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset on disk is missing or inconsistent with its manifest.
struct IngestionError : std::runtime_error {
  explicit IngestionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss or other numerical breakdown during optimization.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace apgn
