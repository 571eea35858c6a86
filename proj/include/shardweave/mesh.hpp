#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shardweave/errors.hpp"

namespace shardweave {

/// Logical device grid for simulated execution: `dp_size` data-parallel
/// replicas by `mp_size` model shards, laid out with the model dim innermost
/// (device id = dp_index * mp_size + mp_index). Devices are assigned to hosts
/// in contiguous id blocks.
class DeviceMesh {
 public:
  DeviceMesh() = default;

  int dp_size() const { return dp_size_; }
  int mp_size() const { return mp_size_; }
  int n_hosts() const { return n_hosts_; }
  int device_count() const { return dp_size_ * mp_size_; }
  int devices_per_host() const { return device_count() / n_hosts_; }

  int device_id(int dp_index, int mp_index) const { return dp_index * mp_size_ + mp_index; }
  int dp_index(int device) const { return device / mp_size_; }
  int mp_index(int device) const { return device % mp_size_; }
  int host_of(int device) const { return device / devices_per_host(); }

  /// Model-shard group of one replica: mp_size consecutive device ids.
  std::vector<int> mp_group(int dp_index) const;

  /// Replica group holding one model shard: device ids strided by mp_size.
  std::vector<int> dp_group(int mp_index) const;

  std::string describe() const;

  friend DeviceMesh build_mesh(int dp_size, int mp_size, int n_hosts);

 private:
  int dp_size_ = 1;
  int mp_size_ = 1;
  int n_hosts_ = 1;
};

/// Validates the geometry and constructs the mesh. The device total must
/// divide evenly across hosts.
DeviceMesh build_mesh(int dp_size, int mp_size, int n_hosts);

/// Host-centric spelling of the same construction: host count times devices
/// per host must equal dp times mp.
DeviceMesh build_mesh(int n_hosts, int devices_per_host, int dp_size, int mp_size);

enum class CollectiveKind : std::uint8_t { kAllReduce, kAllGather, kReduceScatter };

const char* collective_name(CollectiveKind kind);

struct CommStat {
  std::uint64_t count = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t wire_bytes = 0;
  std::uint64_t intra_host_bytes = 0;
  std::uint64_t inter_host_bytes = 0;

  CommStat& operator+=(const CommStat& other);
};

/// Accumulated communication volume, attributed per collective kind and to
/// intra- vs inter-host links via ring neighbor placement.
class CommReport {
 public:
  /// Records one collective over `group` (ascending device ids) moving
  /// `payload_bytes` of logical tensor data. Singleton groups are free and
  /// recorded as nothing.
  void record(CollectiveKind kind, const DeviceMesh& mesh, const std::vector<int>& group,
              std::uint64_t payload_bytes);

  const CommStat& stat(CollectiveKind kind) const;
  CommStat total() const;
  void reset();

  /// One header line plus one row per collective kind, all kinds always
  /// present.
  std::string to_csv() const;

 private:
  CommStat all_reduce_;
  CommStat all_gather_;
  CommStat reduce_scatter_;
};

}  // namespace shardweave
