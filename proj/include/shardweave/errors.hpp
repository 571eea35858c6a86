#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace shardweave {

/// Invalid run or model configuration (mesh geometry, bad spec files, CLI).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sharding rule violation: a tensor's partition does not admit the requested
/// operation on this mesh.
class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or truncated checkpoint. Carries the byte offset where reading
/// went wrong.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& msg, std::uint64_t offset)
      : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg), offset_(0) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace shardweave
