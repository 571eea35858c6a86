#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shardweave/errors.hpp"
#include "shardweave/kernels.hpp"
#include "shardweave/mesh.hpp"
#include "shardweave/sharded_tensor.hpp"
#include "shardweave/tensor.hpp"

namespace shardweave {

namespace detail {

template <typename Scalar>
std::int64_t collective_payload_bytes(const Tensor<Scalar>& t) {
  return static_cast<std::int64_t>(t.numel()) * static_cast<std::int64_t>(sizeof(Scalar));
}

}  // namespace detail

/// In-place ring all-reduce over one group: every buffer ends up holding the
/// elementwise sum. Summation order is ascending group rank, so results are
/// deterministic and identical on every device.
template <typename Scalar>
void all_reduce_sum(std::vector<Tensor<Scalar>*> bufs, const DeviceMesh& mesh,
                    const std::vector<int>& group, CommReport* report) {
  if (bufs.size() != group.size()) {
    throw PartitionError("all_reduce_sum: " + std::to_string(bufs.size()) +
                         " buffers for a group of " + std::to_string(group.size()));
  }
  if (bufs.empty()) return;
  for (std::size_t r = 1; r < bufs.size(); ++r) {
    if (bufs[r]->shape() != bufs[0]->shape()) {
      throw PartitionError("all_reduce_sum: shard shapes differ, " + shape_str(bufs[0]->shape()) +
                           " vs " + shape_str(bufs[r]->shape()));
    }
  }
  if (bufs.size() > 1) {
    Tensor<Scalar> sum = *bufs[0];
    for (std::size_t r = 1; r < bufs.size(); ++r) {
      sum = kernels::add(sum, *bufs[r]);
    }
    for (auto* b : bufs) *b = sum;
  }
  if (report != nullptr) {
    report->record(CollectiveKind::kAllReduce, mesh, group,
                   static_cast<std::uint64_t>(detail::collective_payload_bytes(*bufs[0])));
  }
}

/// In-place ring all-gather over one group: each buffer holds one chunk along
/// `dim`; afterwards every buffer holds the chunks concatenated in ascending
/// group rank order.
template <typename Scalar>
void all_gather(std::vector<Tensor<Scalar>*> bufs, std::int64_t dim, const DeviceMesh& mesh,
                const std::vector<int>& group, CommReport* report) {
  if (bufs.size() != group.size()) {
    throw PartitionError("all_gather: " + std::to_string(bufs.size()) + " buffers for a group of " +
                         std::to_string(group.size()));
  }
  if (bufs.empty()) return;
  Tensor<Scalar> full = *bufs[0];
  for (std::size_t r = 1; r < bufs.size(); ++r) {
    full = kernels::concat(full, *bufs[r], dim);
  }
  if (report != nullptr) {
    report->record(CollectiveKind::kAllGather, mesh, group,
                   static_cast<std::uint64_t>(detail::collective_payload_bytes(full)));
  }
  for (auto* b : bufs) *b = full;
}

/// In-place ring reduce-scatter over one group: buffers are summed
/// elementwise and each rank keeps its own even chunk along `dim`.
template <typename Scalar>
void reduce_scatter(std::vector<Tensor<Scalar>*> bufs, std::int64_t dim, const DeviceMesh& mesh,
                    const std::vector<int>& group, CommReport* report) {
  if (bufs.size() != group.size()) {
    throw PartitionError("reduce_scatter: " + std::to_string(bufs.size()) +
                         " buffers for a group of " + std::to_string(group.size()));
  }
  if (bufs.empty()) return;
  const auto n = static_cast<std::int64_t>(bufs.size());
  const Shape& shape = bufs[0]->shape();
  const auto d = static_cast<std::size_t>(dim);
  if (dim < 0 || d >= shape.size()) {
    throw PartitionError("reduce_scatter: dim " + std::to_string(dim) + " out of range for " +
                         shape_str(shape));
  }
  if (shape[d] % n != 0) {
    throw PartitionError("reduce_scatter: dim " + std::to_string(dim) + " of " + shape_str(shape) +
                         " is not divisible by " + std::to_string(n) + " ranks");
  }
  Tensor<Scalar> sum = *bufs[0];
  for (std::size_t r = 1; r < bufs.size(); ++r) {
    if (bufs[r]->shape() != shape) {
      throw PartitionError("reduce_scatter: shard shapes differ, " + shape_str(shape) + " vs " +
                           shape_str(bufs[r]->shape()));
    }
    sum = kernels::add(sum, *bufs[r]);
  }
  if (report != nullptr) {
    report->record(CollectiveKind::kReduceScatter, mesh, group,
                   static_cast<std::uint64_t>(detail::collective_payload_bytes(sum)));
  }
  const std::int64_t chunk = shape[d] / n;
  for (std::size_t r = 0; r < bufs.size(); ++r) {
    *bufs[r] = kernels::slice(sum, dim, static_cast<std::int64_t>(r) * chunk, chunk);
  }
}

namespace detail {

template <typename Scalar>
std::vector<Tensor<Scalar>*> shard_buffers(ShardedTensor<Scalar>& x) {
  std::vector<Tensor<Scalar>*> bufs;
  bufs.reserve(x.shards.size());
  for (auto& s : x.shards) bufs.push_back(&s);
  return bufs;
}

}  // namespace detail

/// All-reduce over a sharded tensor's per-rank buffers: partial sums become
/// the replicated total.
template <typename Scalar>
void all_reduce_sum(ShardedTensor<Scalar>& x, const DeviceMesh& mesh, const std::vector<int>& group,
                    CommReport* report) {
  auto bufs = detail::shard_buffers(x);
  all_reduce_sum(bufs, mesh, group, report);
  x.partition = Partition::replicated();
}

/// All-gather of a split sharded tensor; every rank ends up replicated.
/// Rejects non-split input so an accidental double gather is caught.
template <typename Scalar>
void all_gather(ShardedTensor<Scalar>& x, const DeviceMesh& mesh, const std::vector<int>& group,
                CommReport* report) {
  if (!x.partition.is_split()) {
    throw PartitionError("all_gather: input must be split, got " + x.partition.describe());
  }
  auto bufs = detail::shard_buffers(x);
  all_gather(bufs, x.partition.dim, mesh, group, report);
  x.partition = Partition::replicated();
}

/// Reduce-scatter of per-rank buffers along `dim`; the result is Split(dim).
template <typename Scalar>
void reduce_scatter(ShardedTensor<Scalar>& x, std::int64_t dim, const DeviceMesh& mesh,
                    const std::vector<int>& group, CommReport* report) {
  if (x.partition.is_split()) {
    throw PartitionError("reduce_scatter: input is already split (" + x.partition.describe() + ")");
  }
  auto bufs = detail::shard_buffers(x);
  reduce_scatter(bufs, dim, mesh, group, report);
  x.partition = Partition::split(dim);
}

}  // namespace shardweave
