#pragma once

#include <stdexcept>
#include <string>

namespace equant {

// Shape or dimension disagreement between tensors.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller broke a documented precondition.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration value or unknown key.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file (dataset, embeddings, cache, checkpoint, dump).
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint restore failure (missing block, shape conflict).
struct RestoreError : std::runtime_error {
  explicit RestoreError(const std::string& msg) : std::runtime_error(msg) {}
};

// Answer span cannot be mapped onto the tokenized context.
struct AlignmentError : std::runtime_error {
  explicit AlignmentError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failure while writing an artifact.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace equant
