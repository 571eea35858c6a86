#pragma once

#include <cstdint>
#include <string>

namespace shardweave {

/// How one logical tensor maps onto the devices of a model-parallel group.
/// Plans only ever contain Replicated and Split entries; PartialSum is an
/// execution-time state (per-device partial results awaiting an all_reduce).
struct Partition {
  enum class Kind : std::uint8_t { kReplicated, kSplit, kPartialSum };

  Kind kind = Kind::kReplicated;
  std::int64_t dim = -1;

  static Partition replicated() { return {}; }
  static Partition split(std::int64_t dim) { return {Kind::kSplit, dim}; }
  static Partition partial_sum() { return {Kind::kPartialSum, -1}; }

  bool is_replicated() const { return kind == Kind::kReplicated; }
  bool is_split() const { return kind == Kind::kSplit; }
  bool is_partial() const { return kind == Kind::kPartialSum; }

  bool operator==(const Partition& other) const {
    if (kind != other.kind) return false;
    return kind != Kind::kSplit || dim == other.dim;
  }
  bool operator!=(const Partition& other) const { return !(*this == other); }

  std::string describe() const {
    switch (kind) {
      case Kind::kReplicated: return "replicated";
      case Kind::kSplit: return "split:" + std::to_string(dim);
      case Kind::kPartialSum: return "partial_sum";
    }
    return "?";
  }
};

}  // namespace shardweave
