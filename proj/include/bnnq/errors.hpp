#pragma once

#include <stdexcept>
#include <string>

namespace bnnq {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file. `offset` is the byte position where parsing
/// gave up, or -1 when the problem is not tied to a position (wrong size).
struct FormatError : std::runtime_error {
  FormatError(const std::string& what, long long offset = -1)
      : std::runtime_error(offset >= 0 ? what + " (at byte offset " + std::to_string(offset) + ")" : what),
        offset(offset) {}
  long long offset;
};

/// Non-finite loss or gradient during training.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace bnnq
