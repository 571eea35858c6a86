#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "shardweave/errors.hpp"
#include "shardweave/plan.hpp"
#include "shardweave/rng.hpp"
#include "shardweave/train_state.hpp"

namespace shardweave {

/// Binary train-state snapshot.
///
/// Layout: magic `SWCK`, format version u32, optimizer step u64, an RNG
/// block (state seed u64, stream count u32, then per stream: name length
/// u32, name bytes, seed u64, stream id u64, counter u64), then tensor
/// records until end of file. Each record is: name length u32, name bytes,
/// dtype u8 (0 = f32, 1 = f64), rank u32, dims u64 x rank, payload as
/// little-endian scalars. Records come in consecutive triples per parameter
/// (`params/x`, `adam_m/x`, `adam_v/x`), each holding the gathered full
/// tensor; sharding is reapplied on load from the caller's plan. All
/// multi-byte integers are little-endian.

namespace detail {

constexpr char kCheckpointMagic[4] = {'S', 'W', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
struct dtype_code;
template <>
struct dtype_code<float> {
  static constexpr std::uint8_t value = 0;
  static constexpr const char* name = "f32";
};
template <>
struct dtype_code<double> {
  static constexpr std::uint8_t value = 1;
  static constexpr const char* name = "f64";
};

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  }

  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    raw(b, 4);
  }
  void u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    raw(b, 8);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void scalar(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void scalar(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void close() {
    out_.close();
    if (!out_) throw CheckpointError("checkpoint: write to '" + path_ + "' failed");
  }

 private:
  void raw(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw CheckpointError("checkpoint: write to '" + path_ + "' failed");
  }

  std::string path_;
  std::ofstream out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "' for reading");
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const unsigned char* b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const unsigned char* b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint64_t at = pos_;
    const std::uint32_t len = u32();
    if (len > bytes_.size() - pos_) {
      throw CheckpointError("checkpoint: string of length " + std::to_string(len) +
                                " overruns the file",
                            at);
    }
    const unsigned char* b = take(len);
    return std::string(reinterpret_cast<const char*>(b), len);
  }
  void scalar(float& v) { v = std::bit_cast<float>(u32()); }
  void scalar(double& v) { v = std::bit_cast<double>(u64()); }

 private:
  const unsigned char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError("checkpoint: truncated, needed " + std::to_string(n) +
                                " more bytes",
                            pos_);
    }
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::vector<unsigned char> bytes_;
  std::uint64_t pos_ = 0;
};

template <typename Scalar>
void write_record(ByteWriter& w, const std::string& name, const Tensor<Scalar>& t) {
  w.str(name);
  w.u8(dtype_code<Scalar>::value);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::int64_t d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
  for (std::int64_t i = 0; i < t.numel(); ++i) w.scalar(t[i]);
}

template <typename Scalar>
std::pair<std::string, Tensor<Scalar>> read_record(ByteReader& r) {
  const std::string name = r.str();
  const std::uint64_t dtype_at = r.offset();
  const std::uint8_t dtype = r.u8();
  if (dtype != dtype_code<Scalar>::value) {
    throw CheckpointError("checkpoint: record '" + name + "' has dtype code " +
                              std::to_string(dtype) + ", expected " + dtype_code<Scalar>::name,
                          dtype_at);
  }
  const std::uint32_t rank = r.u32();
  if (rank > 16) {
    throw CheckpointError("checkpoint: record '" + name + "' has implausible rank " +
                              std::to_string(rank),
                          dtype_at + 1);
  }
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.u64()));
  Tensor<Scalar> t = Tensor<Scalar>::zeros(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) r.scalar(t[i]);
  return {name, std::move(t)};
}

/// Gathers one logical tensor from data-parallel replica 0 of the state.
template <typename Scalar>
Tensor<Scalar> gather_state_tensor(const std::vector<std::vector<Tensor<Scalar>>>& bank,
                                   const TrainState<Scalar>& state, std::size_t p,
                                   const DeviceMesh& mesh) {
  ShardedTensor<Scalar> sharded;
  sharded.global = state.shapes[p];
  sharded.partition = state.partitions[p];
  for (int j = 0; j < mesh.mp_size(); ++j) {
    sharded.shards.push_back(bank[p][static_cast<std::size_t>(mesh.device_id(0, j))]);
  }
  return gather(sharded);
}

}  // namespace detail

/// Named RNG streams captured alongside the train state.
using RngSnapshot = std::vector<std::pair<std::string, RngStream>>;

template <typename Scalar>
void save_checkpoint(const std::string& path, const TrainState<Scalar>& state,
                     const DeviceMesh& mesh, const RngSnapshot& rngs = {}) {
  detail::ByteWriter w(path);
  w.u8(static_cast<std::uint8_t>(detail::kCheckpointMagic[0]));
  w.u8(static_cast<std::uint8_t>(detail::kCheckpointMagic[1]));
  w.u8(static_cast<std::uint8_t>(detail::kCheckpointMagic[2]));
  w.u8(static_cast<std::uint8_t>(detail::kCheckpointMagic[3]));
  w.u32(detail::kCheckpointVersion);
  w.u64(state.step);
  w.u64(state.seed);
  w.u32(static_cast<std::uint32_t>(rngs.size()));
  for (const auto& [name, stream] : rngs) {
    w.str(name);
    w.u64(stream.seed());
    w.u64(stream.stream_id());
    w.u64(stream.counter());
  }
  for (std::size_t p = 0; p < state.names.size(); ++p) {
    detail::write_record(w, "params/" + state.names[p],
                         detail::gather_state_tensor(state.params, state, p, mesh));
    detail::write_record(w, "adam_m/" + state.names[p],
                         detail::gather_state_tensor(state.adam_m, state, p, mesh));
    detail::write_record(w, "adam_v/" + state.names[p],
                         detail::gather_state_tensor(state.adam_v, state, p, mesh));
  }
  w.close();
}

template <typename Scalar>
struct LoadedCheckpoint {
  TrainState<Scalar> state;
  RngSnapshot rngs;
};

/// Reads a snapshot back and re-cuts every tensor onto the mesh according to
/// `plan`. Sharding a gathered tensor reproduces the original device copies
/// bit for bit, so a load followed by more training continues the exact
/// trajectory of an uninterrupted run.
template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::string& path, const ShardingPlan& plan,
                                         const DeviceMesh& mesh) {
  detail::ByteReader r(path);
  for (char expect : detail::kCheckpointMagic) {
    const std::uint64_t at = r.offset();
    if (static_cast<char>(r.u8()) != expect) {
      throw CheckpointError("checkpoint: bad magic, not a checkpoint file", at);
    }
  }
  const std::uint64_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version),
                          version_at);
  }

  LoadedCheckpoint<Scalar> out;
  out.state.step = r.u64();
  out.state.seed = r.u64();
  const std::uint32_t n_rngs = r.u32();
  for (std::uint32_t i = 0; i < n_rngs; ++i) {
    std::string name = r.str();
    const std::uint64_t seed = r.u64();
    const std::uint64_t stream_id = r.u64();
    const std::uint64_t counter = r.u64();
    out.rngs.emplace_back(std::move(name), RngStream(seed, stream_id, counter));
  }

  const int devices = mesh.device_count();
  while (!r.at_end()) {
    const std::uint64_t record_at = r.offset();
    auto [pname, param] = detail::read_record<Scalar>(r);
    if (pname.rfind("params/", 0) != 0) {
      throw CheckpointError("checkpoint: expected a params/ record, got '" + pname + "'",
                            record_at);
    }
    const std::string name = pname.substr(7);
    auto [mname, m] = detail::read_record<Scalar>(r);
    auto [vname, v] = detail::read_record<Scalar>(r);
    if (mname != "adam_m/" + name || vname != "adam_v/" + name) {
      throw CheckpointError("checkpoint: records for '" + name + "' are incomplete", record_at);
    }
    if (m.shape() != param.shape() || v.shape() != param.shape()) {
      throw CheckpointError("checkpoint: optimizer moments for '" + name +
                                "' do not match the parameter shape",
                            record_at);
    }

    const Partition partition = plan.at(name);
    out.state.names.push_back(name);
    out.state.partitions.push_back(partition);
    out.state.shapes.push_back(param.shape());
    const auto place = [&](const Tensor<Scalar>& full) {
      const ShardedTensor<Scalar> sharded = shard(full, partition, mesh.mp_size());
      std::vector<Tensor<Scalar>> per_device(static_cast<std::size_t>(devices));
      for (int d = 0; d < devices; ++d) {
        per_device[static_cast<std::size_t>(d)] = sharded.shard(mesh.mp_index(d));
      }
      return per_device;
    };
    out.state.params.push_back(place(param));
    out.state.adam_m.push_back(place(m));
    out.state.adam_v.push_back(place(v));
  }
  return out;
}

}  // namespace shardweave
