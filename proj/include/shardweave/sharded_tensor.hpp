#pragma once

#include <string>
#include <vector>

#include "shardweave/errors.hpp"
#include "shardweave/kernels.hpp"
#include "shardweave/partition.hpp"
#include "shardweave/tensor.hpp"

namespace shardweave {

/// Per-device slice of a tensor's split dim: even chunks, one per rank.
inline std::int64_t shard_extent(std::int64_t dim_size, int n_shards) {
  return dim_size / n_shards;
}

/// Shape each device holds for a tensor under `partition` across `n_shards`
/// devices.
inline Shape local_shape(const Shape& global, const Partition& partition, int n_shards) {
  Shape out = global;
  if (partition.is_split()) {
    const auto d = static_cast<std::size_t>(partition.dim);
    if (partition.dim < 0 || d >= global.size()) {
      throw PartitionError("local_shape: split dim " + std::to_string(partition.dim) +
                           " out of range for " + shape_str(global));
    }
    if (global[d] % n_shards != 0) {
      throw PartitionError("local_shape: dim " + std::to_string(partition.dim) + " of " +
                           shape_str(global) + " is not divisible by " +
                           std::to_string(n_shards) + " shards");
    }
    out[d] = global[d] / n_shards;
  }
  return out;
}

/// One logical tensor spread over a model-parallel group: its global shape,
/// the partition that maps it onto devices, and the per-rank shards.
template <typename Scalar>
struct ShardedTensor {
  Shape global;
  Partition partition;
  std::vector<Tensor<Scalar>> shards;

  int n_shards() const { return static_cast<int>(shards.size()); }
  const Tensor<Scalar>& shard(int rank) const { return shards.at(static_cast<std::size_t>(rank)); }
};

/// Cuts `full` into shards per the partition. Replicated tensors are copied
/// onto every rank.
template <typename Scalar>
ShardedTensor<Scalar> shard(const Tensor<Scalar>& full, const Partition& partition, int n_shards) {
  if (n_shards < 1) {
    throw PartitionError("shard: need at least one shard, got " + std::to_string(n_shards));
  }
  if (partition.is_partial()) {
    throw PartitionError("shard: cannot shard into partial_sum state");
  }
  ShardedTensor<Scalar> out;
  out.global = full.shape();
  out.partition = partition;
  out.shards.reserve(static_cast<std::size_t>(n_shards));
  if (partition.is_replicated()) {
    for (int r = 0; r < n_shards; ++r) out.shards.push_back(full);
    return out;
  }
  const Shape local = local_shape(full.shape(), partition, n_shards);
  const std::int64_t chunk = local[static_cast<std::size_t>(partition.dim)];
  for (int r = 0; r < n_shards; ++r) {
    out.shards.push_back(kernels::slice(full, partition.dim, r * chunk, chunk));
  }
  return out;
}

/// Reassembles the logical tensor: concat for split, sum for partial, the
/// common copy for replicated.
template <typename Scalar>
Tensor<Scalar> gather(const ShardedTensor<Scalar>& sharded) {
  if (sharded.shards.empty()) {
    throw PartitionError("gather: sharded tensor has no shards");
  }
  if (sharded.partition.is_replicated()) {
    return sharded.shards[0];
  }
  if (sharded.partition.is_partial()) {
    Tensor<Scalar> sum = sharded.shards[0];
    for (std::size_t r = 1; r < sharded.shards.size(); ++r) {
      sum = kernels::add(sum, sharded.shards[r]);
    }
    return sum;
  }
  Tensor<Scalar> full = sharded.shards[0];
  for (std::size_t r = 1; r < sharded.shards.size(); ++r) {
    full = kernels::concat(full, sharded.shards[r], sharded.partition.dim);
  }
  return full;
}

/// True when every rank's shard is bitwise consistent with the partition
/// (identical copies for replicated; correct local shapes for split).
template <typename Scalar>
bool consistent(const ShardedTensor<Scalar>& sharded) {
  if (sharded.shards.empty()) return false;
  if (sharded.partition.is_replicated()) {
    for (std::size_t r = 1; r < sharded.shards.size(); ++r) {
      if (!sharded.shards[r].bit_equal(sharded.shards[0])) return false;
    }
    return sharded.shards[0].shape() == sharded.global;
  }
  if (sharded.partition.is_split()) {
    const Shape local = local_shape(sharded.global, sharded.partition, sharded.n_shards());
    for (const auto& s : sharded.shards) {
      if (s.shape() != local) return false;
    }
    return true;
  }
  for (const auto& s : sharded.shards) {
    if (s.shape() != sharded.global) return false;
  }
  return true;
}

}  // namespace shardweave
