#include <string>

#include "doctest.h"
#include "shardweave/mesh.hpp"

using namespace shardweave;

TEST_CASE("mesh layout puts model shards innermost") {
  DeviceMesh mesh = build_mesh(2, 4, 2);
  CHECK(mesh.device_count() == 8);
  CHECK(mesh.devices_per_host() == 4);
  CHECK(mesh.device_id(0, 0) == 0);
  CHECK(mesh.device_id(0, 3) == 3);
  CHECK(mesh.device_id(1, 0) == 4);
  CHECK(mesh.dp_index(6) == 1);
  CHECK(mesh.mp_index(6) == 2);
  CHECK(mesh.host_of(3) == 0);
  CHECK(mesh.host_of(4) == 1);

  CHECK(mesh.mp_group(1) == std::vector<int>{4, 5, 6, 7});
  CHECK(mesh.dp_group(2) == std::vector<int>{2, 6});
}

TEST_CASE("mesh rejects geometry that does not fill hosts evenly") {
  CHECK_THROWS_AS(build_mesh(2, 3, 4), ConfigError);
  std::string msg;
  try {
    build_mesh(2, 3, 4);
  } catch (const ConfigError& e) {
    msg = e.what();
  }
  CHECK(msg.find("6") != std::string::npos);
  CHECK(msg.find("dp=2") != std::string::npos);
  CHECK(msg.find("mp=3") != std::string::npos);
  CHECK(msg.find("4 hosts") != std::string::npos);

  CHECK_THROWS_AS(build_mesh(0, 1, 1), ConfigError);
  CHECK_THROWS_AS(build_mesh(1, -2, 1), ConfigError);
}

TEST_CASE("all_reduce ring accounting on four devices") {
  DeviceMesh mesh = build_mesh(1, 4, 1);
  CommReport report;
  report.record(CollectiveKind::kAllReduce, mesh, mesh.mp_group(0), 4000);
  const CommStat& s = report.stat(CollectiveKind::kAllReduce);
  CHECK(s.count == 1);
  CHECK(s.payload_bytes == 4000);
  // 2 * (n-1)/n * payload per device: 6000 each, 24000 across the group.
  CHECK(s.wire_bytes == 24000);
  CHECK(s.intra_host_bytes == 24000);
  CHECK(s.inter_host_bytes == 0);
}

TEST_CASE("gather-style collectives move (n-1)/n of the full tensor") {
  DeviceMesh mesh = build_mesh(1, 4, 1);
  CommReport report;
  report.record(CollectiveKind::kAllGather, mesh, mesh.mp_group(0), 4000);
  report.record(CollectiveKind::kReduceScatter, mesh, mesh.mp_group(0), 4000);
  CHECK(report.stat(CollectiveKind::kAllGather).wire_bytes == 12000);
  CHECK(report.stat(CollectiveKind::kReduceScatter).wire_bytes == 12000);
  CHECK(report.total().count == 2);
}

TEST_CASE("singleton groups cost nothing") {
  DeviceMesh mesh = build_mesh(1, 1, 1);
  CommReport report;
  report.record(CollectiveKind::kAllReduce, mesh, mesh.mp_group(0), 999999);
  CHECK(report.total().count == 0);
  CHECK(report.total().wire_bytes == 0);
}

TEST_CASE("ring edges crossing hosts are attributed to inter-host traffic") {
  // Four devices on two hosts: ring 0->1->2->3->0 has two edges inside hosts
  // (0->1, 2->3) and two between them (1->2, 3->0).
  DeviceMesh mesh = build_mesh(1, 4, 2);
  CommReport report;
  report.record(CollectiveKind::kAllReduce, mesh, mesh.mp_group(0), 4000);
  const CommStat& s = report.stat(CollectiveKind::kAllReduce);
  CHECK(s.intra_host_bytes == 12000);
  CHECK(s.inter_host_bytes == 12000);
  CHECK(s.intra_host_bytes + s.inter_host_bytes == s.wire_bytes);
}

TEST_CASE("comm report serializes every collective kind") {
  DeviceMesh mesh = build_mesh(1, 2, 1);
  CommReport report;
  report.record(CollectiveKind::kAllReduce, mesh, {0, 1}, 800);
  const std::string csv = report.to_csv();
  CHECK(csv.find("collective,count,payload_bytes,wire_bytes,intra_host_bytes,inter_host_bytes\n") ==
        0);
  CHECK(csv.find("all_reduce,1,800,1600,1600,0\n") != std::string::npos);
  CHECK(csv.find("all_gather,0,0,0,0,0\n") != std::string::npos);
  CHECK(csv.find("reduce_scatter,0,0,0,0,0\n") != std::string::npos);
}

TEST_CASE("mesh describes itself") {
  DeviceMesh mesh = build_mesh(2, 2, 2);
  const std::string d = mesh.describe();
  CHECK(d.find("2x2") != std::string::npos);
  CHECK(d.find("4 devices") != std::string::npos);
}
