#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace drarmor {

// Invalid model/experiment configuration (bad shapes, unknown keys, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller-supplied data violates a precondition (label out of range, empty input).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Two values that must come from the same computation do not match.
class ConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed file contents. Carries the byte offset where parsing failed.
class IngestionError : public std::runtime_error {
 public:
  IngestionError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace drarmor
