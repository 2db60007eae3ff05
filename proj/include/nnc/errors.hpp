#pragma once

#include <stdexcept>
#include <string>

namespace nnc {

// Shape/resolution problems: mismatched extents, invalid conv geometry.
struct DimError : std::runtime_error {
  explicit DimError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// Invalid hyperparameters or option combinations.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// A caller violated an operation's preconditions.
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error("contract error: " + msg) {}
};

// Dataset ingestion problems (missing folders, undecodable corpora).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

// Filesystem failures outside the checkpoint format itself.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Malformed, truncated, or mismatched checkpoint files.
struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error("checkpoint error: " + msg) {}
};

}  // namespace nnc
