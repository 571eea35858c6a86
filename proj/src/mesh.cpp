#include "shardweave/mesh.hpp"

#include <sstream>

namespace shardweave {

std::vector<int> DeviceMesh::mp_group(int dp_index) const {
  std::vector<int> group(static_cast<std::size_t>(mp_size_));
  for (int j = 0; j < mp_size_; ++j) group[static_cast<std::size_t>(j)] = device_id(dp_index, j);
  return group;
}

std::vector<int> DeviceMesh::dp_group(int mp_index) const {
  std::vector<int> group(static_cast<std::size_t>(dp_size_));
  for (int i = 0; i < dp_size_; ++i) group[static_cast<std::size_t>(i)] = device_id(i, mp_index);
  return group;
}

std::string DeviceMesh::describe() const {
  std::ostringstream out;
  out << "mesh " << dp_size_ << "x" << mp_size_ << " (" << device_count() << " devices on "
      << n_hosts_ << " host" << (n_hosts_ == 1 ? "" : "s") << ", " << devices_per_host()
      << " per host)";
  return out.str();
}

DeviceMesh build_mesh(int dp_size, int mp_size, int n_hosts) {
  if (dp_size < 1 || mp_size < 1 || n_hosts < 1) {
    throw ConfigError("build_mesh: sizes must be positive, got dp=" + std::to_string(dp_size) +
                      " mp=" + std::to_string(mp_size) + " hosts=" + std::to_string(n_hosts));
  }
  const int total = dp_size * mp_size;
  if (total % n_hosts != 0) {
    throw ConfigError("build_mesh: " + std::to_string(total) + " devices (dp=" +
                      std::to_string(dp_size) + " x mp=" + std::to_string(mp_size) +
                      ") cannot be placed evenly on " + std::to_string(n_hosts) + " hosts");
  }
  DeviceMesh mesh;
  mesh.dp_size_ = dp_size;
  mesh.mp_size_ = mp_size;
  mesh.n_hosts_ = n_hosts;
  return mesh;
}

DeviceMesh build_mesh(int n_hosts, int devices_per_host, int dp_size, int mp_size) {
  if (n_hosts < 1 || devices_per_host < 1 || dp_size < 1 || mp_size < 1) {
    throw ConfigError("build_mesh: sizes must be positive, got hosts=" + std::to_string(n_hosts) +
                      " devices_per_host=" + std::to_string(devices_per_host) +
                      " dp=" + std::to_string(dp_size) + " mp=" + std::to_string(mp_size));
  }
  if (n_hosts * devices_per_host != dp_size * mp_size) {
    throw ConfigError("build_mesh: hosts=" + std::to_string(n_hosts) + " x devices_per_host=" +
                      std::to_string(devices_per_host) + " does not equal dp=" +
                      std::to_string(dp_size) + " x mp=" + std::to_string(mp_size));
  }
  return build_mesh(dp_size, mp_size, n_hosts);
}

const char* collective_name(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::kAllReduce: return "all_reduce";
    case CollectiveKind::kAllGather: return "all_gather";
    case CollectiveKind::kReduceScatter: return "reduce_scatter";
  }
  return "?";
}

CommStat& CommStat::operator+=(const CommStat& other) {
  count += other.count;
  payload_bytes += other.payload_bytes;
  wire_bytes += other.wire_bytes;
  intra_host_bytes += other.intra_host_bytes;
  inter_host_bytes += other.inter_host_bytes;
  return *this;
}

void CommReport::record(CollectiveKind kind, const DeviceMesh& mesh, const std::vector<int>& group,
                        std::uint64_t payload_bytes) {
  const std::uint64_t n = group.size();
  if (n <= 1) return;

  // Ring cost model: all_reduce moves 2(n-1)/n of the payload per device,
  // gather-style collectives (n-1)/n of the full tensor.
  const std::uint64_t numerator =
      kind == CollectiveKind::kAllReduce ? 2 * (n - 1) * payload_bytes : (n - 1) * payload_bytes;
  const std::uint64_t per_device = numerator / n;

  CommStat delta;
  delta.count = 1;
  delta.payload_bytes = payload_bytes;
  delta.wire_bytes = per_device * n;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const int from = group[i];
    const int to = group[(i + 1) % group.size()];
    if (mesh.host_of(from) == mesh.host_of(to)) {
      delta.intra_host_bytes += per_device;
    } else {
      delta.inter_host_bytes += per_device;
    }
  }

  switch (kind) {
    case CollectiveKind::kAllReduce: all_reduce_ += delta; break;
    case CollectiveKind::kAllGather: all_gather_ += delta; break;
    case CollectiveKind::kReduceScatter: reduce_scatter_ += delta; break;
  }
}

const CommStat& CommReport::stat(CollectiveKind kind) const {
  switch (kind) {
    case CollectiveKind::kAllGather: return all_gather_;
    case CollectiveKind::kReduceScatter: return reduce_scatter_;
    case CollectiveKind::kAllReduce: break;
  }
  return all_reduce_;
}

CommStat CommReport::total() const {
  CommStat sum;
  sum += all_reduce_;
  sum += all_gather_;
  sum += reduce_scatter_;
  return sum;
}

void CommReport::reset() { *this = CommReport(); }

std::string CommReport::to_csv() const {
  std::ostringstream out;
  out << "collective,count,payload_bytes,wire_bytes,intra_host_bytes,inter_host_bytes\n";
  for (CollectiveKind kind : {CollectiveKind::kAllReduce, CollectiveKind::kAllGather,
                              CollectiveKind::kReduceScatter}) {
    const CommStat& s = stat(kind);
    out << collective_name(kind) << ',' << s.count << ',' << s.payload_bytes << ',' << s.wire_bytes
        << ',' << s.intra_host_bytes << ',' << s.inter_host_bytes << '\n';
  }
  return out.str();
}

}  // namespace shardweave
