#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "shardweave/checkpoint.hpp"
#include "shardweave/plan.hpp"
#include "shardweave/rng.hpp"
#include "shardweave/train_state.hpp"
#include "doctest.h"

using namespace shardweave;

namespace {

template <typename Scalar>
ParamTree<Scalar> make_tree(std::uint64_t seed) {
  RngStream rng(seed, "ckpt-tree");
  ParamTree<Scalar> tree;
  auto fill = [&rng](const Shape& shape) {
    Tensor<Scalar> t = Tensor<Scalar>::zeros(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t.data()[i] = static_cast<Scalar>(rng.next_normal());
    }
    return t;
  };
  tree.add("block_0/attn/q/kernel", fill({8, 8}));
  tree.add("block_0/attn/q/bias", fill({8}));
  tree.add("block_0/mlp/fc1/kernel", fill({16, 8}));
  tree.add("block_0/mlp/fc1/bias", fill({16}));
  tree.add("block_0/mlp/fc2/kernel", fill({8, 16}));
  return tree;
}

template <typename Scalar>
bool states_bit_equal(const TrainState<Scalar>& a, const TrainState<Scalar>& b) {
  if (a.step != b.step || a.seed != b.seed || a.names != b.names) return false;
  for (std::size_t p = 0; p < a.names.size(); ++p) {
    for (std::size_t d = 0; d < a.params[p].size(); ++d) {
      if (!a.params[p][d].bit_equal(b.params[p][d])) return false;
      if (!a.adam_m[p][d].bit_equal(b.adam_m[p][d])) return false;
      if (!a.adam_v[p][d].bit_equal(b.adam_v[p][d])) return false;
    }
  }
  return true;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round-trips a trained state bit-exactly") {
  const DeviceMesh mesh = build_mesh(2, 2, 1);
  ParamTree<double> tree = make_tree<double>(1);
  const ShardingPlan plan = derive_plan(tree, mesh.mp_size());
  TrainState<double> state = shard_params(tree, plan, mesh, 99);

  RngStream grad_rng(5, "grads");
  AdamWConfig cfg;
  cfg.lr = 3e-2;
  cfg.weight_decay = 0.01;
  for (int s = 0; s < 3; ++s) {
    DeviceGrads<double> grads = zero_grads_like(state);
    for (std::size_t p = 0; p < grads.size(); ++p) {
      const bool replicated = state.partitions[p].is_replicated();
      std::vector<Tensor<double>>& per_device = grads[p];
      for (int j = 0; j < mesh.mp_size(); ++j) {
        Tensor<double>& first = per_device[static_cast<std::size_t>(mesh.device_id(0, j))];
        if (j == 0 || !replicated) {
          for (std::int64_t i = 0; i < first.numel(); ++i) {
            first[i] = grad_rng.next_normal();
          }
        } else {
          first = per_device[static_cast<std::size_t>(mesh.device_id(0, 0))];
        }
        for (int r = 1; r < mesh.dp_size(); ++r) {
          per_device[static_cast<std::size_t>(mesh.device_id(r, j))] = first;
        }
      }
    }
    adamw_step(state, grads, cfg);
  }
  REQUIRE(state.step == 3);

  RngStream train_rng(42, "train");
  for (int i = 0; i < 17; ++i) train_rng.next_u64();

  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, state, mesh, {{"train", train_rng}});

  LoadedCheckpoint<double> loaded = load_checkpoint<double>(path, plan, mesh);
  CHECK(states_bit_equal(state, loaded.state));

  REQUIRE(loaded.rngs.size() == 1);
  CHECK(loaded.rngs[0].first == "train");
  RngStream restored = loaded.rngs[0].second;
  CHECK(restored.counter() == train_rng.counter());
  for (int i = 0; i < 8; ++i) CHECK(restored.next_u64() == train_rng.next_u64());
}

TEST_CASE("checkpoint re-shards onto a different mesh") {
  ParamTree<double> tree = make_tree<double>(2);
  const DeviceMesh save_mesh = build_mesh(1, 2, 1);
  const ShardingPlan save_plan = derive_plan(tree, save_mesh.mp_size());
  TrainState<double> state = shard_params(tree, save_plan, save_mesh, 7);

  const std::string path = temp_path("reshard.ckpt");
  save_checkpoint(path, state, save_mesh);

  for (int mp : {1, 4}) {
    CAPTURE(mp);
    const DeviceMesh load_mesh = build_mesh(2, mp, 1);
    const ShardingPlan load_plan = derive_plan(tree, mp);
    LoadedCheckpoint<double> loaded = load_checkpoint<double>(path, load_plan, load_mesh);
    CHECK(loaded.state.step == state.step);
    ParamTree<double> gathered = gather_params(loaded.state, load_mesh);
    for (const auto& [name, original] : tree.entries()) {
      CHECK(gathered.at(name).bit_equal(original));
    }
  }
}

TEST_CASE("checkpoint float32 payloads survive the trip") {
  const DeviceMesh mesh = build_mesh(1, 2, 1);
  ParamTree<float> tree = make_tree<float>(3);
  const ShardingPlan plan = derive_plan(tree, mesh.mp_size());
  TrainState<float> state = shard_params(tree, plan, mesh, 11);

  const std::string path = temp_path("f32.ckpt");
  save_checkpoint(path, state, mesh);
  LoadedCheckpoint<float> loaded = load_checkpoint<float>(path, plan, mesh);
  CHECK(states_bit_equal(state, loaded.state));
}

TEST_CASE("checkpoint rejects files that are not checkpoints") {
  const DeviceMesh mesh = build_mesh(1, 1, 1);
  ParamTree<double> tree = make_tree<double>(4);
  const ShardingPlan plan = derive_plan(tree, 1);

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint<double>(temp_path("does-not-exist.ckpt"), plan, mesh),
                    CheckpointError);
  }
  SUBCASE("empty file") {
    const std::string path = temp_path("empty.ckpt");
    spit(path, "");
    try {
      load_checkpoint<double>(path, plan, mesh);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SUBCASE("bad magic") {
    const std::string path = temp_path("magic.ckpt");
    spit(path, std::string("NOPE") + std::string(64, '\0'));
    try {
      load_checkpoint<double>(path, plan, mesh);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("not a checkpoint") != std::string::npos);
    }
  }
}

TEST_CASE("checkpoint reports truncation with a byte offset") {
  const DeviceMesh mesh = build_mesh(1, 2, 1);
  ParamTree<double> tree = make_tree<double>(5);
  const ShardingPlan plan = derive_plan(tree, mesh.mp_size());
  TrainState<double> state = shard_params(tree, plan, mesh, 1);

  const std::string path = temp_path("full.ckpt");
  save_checkpoint(path, state, mesh);
  const std::string bytes = slurp(path);
  REQUIRE(bytes.size() > 40);

  const std::string cut_path = temp_path("cut.ckpt");
  spit(cut_path, bytes.substr(0, bytes.size() / 2));
  try {
    load_checkpoint<double>(cut_path, plan, mesh);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK(msg.find("byte offset") != std::string::npos);
  }
}

TEST_CASE("checkpoint rejects a scalar-type mismatch") {
  const DeviceMesh mesh = build_mesh(1, 1, 1);
  ParamTree<double> tree = make_tree<double>(6);
  const ShardingPlan plan = derive_plan(tree, 1);
  TrainState<double> state = shard_params(tree, plan, mesh);

  const std::string path = temp_path("dtype.ckpt");
  save_checkpoint(path, state, mesh);
  try {
    load_checkpoint<float>(path, plan, mesh);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("f32") != std::string::npos);
  }
}

TEST_CASE("checkpoint rejects an unknown version") {
  const DeviceMesh mesh = build_mesh(1, 1, 1);
  ParamTree<double> tree = make_tree<double>(7);
  const ShardingPlan plan = derive_plan(tree, 1);
  TrainState<double> state = shard_params(tree, plan, mesh);

  const std::string path = temp_path("version.ckpt");
  save_checkpoint(path, state, mesh);
  std::string bytes = slurp(path);
  bytes[4] = static_cast<char>(0xEE);
  const std::string bad_path = temp_path("version-bad.ckpt");
  spit(bad_path, bytes);
  CHECK_THROWS_AS(load_checkpoint<double>(bad_path, plan, mesh), CheckpointError);
}
