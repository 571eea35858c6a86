#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "shardweave/collectives.hpp"
#include "shardweave/errors.hpp"
#include "shardweave/mesh.hpp"
#include "shardweave/params.hpp"
#include "shardweave/plan.hpp"
#include "shardweave/sharded_tensor.hpp"
#include "shardweave/spmd.hpp"
#include "shardweave/tensor.hpp"

namespace shardweave {

/// Everything the optimizer owns, laid out per device: parameters and AdamW
/// moments, each sharded by the plan within every model-parallel group and
/// replicated across the data-parallel axis. Moments always carry their
/// parameter's partition.
template <typename Scalar>
struct TrainState {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> names;
  std::vector<Partition> partitions;
  std::vector<Shape> shapes;
  // Indexed [param][device id].
  std::vector<std::vector<Tensor<Scalar>>> params;
  std::vector<std::vector<Tensor<Scalar>>> adam_m;
  std::vector<std::vector<Tensor<Scalar>>> adam_v;

  std::size_t param_index(const std::string& name) const {
    for (std::size_t p = 0; p < names.size(); ++p) {
      if (names[p] == name) return p;
    }
    throw ConfigError("TrainState: no parameter named '" + name + "'");
  }
};

/// Per-parameter, per-device gradient buffers with the same layout as
/// TrainState::params.
template <typename Scalar>
using DeviceGrads = std::vector<std::vector<Tensor<Scalar>>>;

/// Cuts every parameter into its planned shards on each data-parallel
/// replica's device group and zero-initializes the AdamW moments alongside.
template <typename Scalar>
TrainState<Scalar> shard_params(const ParamTree<Scalar>& tree, const ShardingPlan& plan,
                                const DeviceMesh& mesh, std::uint64_t seed = 0) {
  TrainState<Scalar> state;
  state.seed = seed;
  const int devices = mesh.device_count();
  for (const auto& [name, full] : tree.entries()) {
    const Partition partition = plan.at(name);
    const ShardedTensor<Scalar> sharded = shard(full, partition, mesh.mp_size());
    state.names.push_back(name);
    state.partitions.push_back(partition);
    state.shapes.push_back(full.shape());
    std::vector<Tensor<Scalar>> per_device(static_cast<std::size_t>(devices));
    std::vector<Tensor<Scalar>> zeros(static_cast<std::size_t>(devices));
    for (int d = 0; d < devices; ++d) {
      const Tensor<Scalar>& local = sharded.shard(mesh.mp_index(d));
      per_device[static_cast<std::size_t>(d)] = local;
      zeros[static_cast<std::size_t>(d)] = Tensor<Scalar>::zeros(local.shape());
    }
    state.params.push_back(std::move(per_device));
    state.adam_m.push_back(zeros);
    state.adam_v.push_back(std::move(zeros));
  }
  return state;
}

/// Reassembles the full parameter tree from data-parallel replica 0.
template <typename Scalar>
ParamTree<Scalar> gather_params(const TrainState<Scalar>& state, const DeviceMesh& mesh) {
  ParamTree<Scalar> tree;
  for (std::size_t p = 0; p < state.names.size(); ++p) {
    ShardedTensor<Scalar> sharded;
    sharded.global = state.shapes[p];
    sharded.partition = state.partitions[p];
    sharded.shards.reserve(static_cast<std::size_t>(mesh.mp_size()));
    for (int j = 0; j < mesh.mp_size(); ++j) {
      sharded.shards.push_back(state.params[p][static_cast<std::size_t>(mesh.device_id(0, j))]);
    }
    tree.add(state.names[p], gather(sharded));
  }
  return tree;
}

/// Parameter views for one replica's model-parallel group, feeding the SPMD
/// executor without copying.
template <typename Scalar>
SpmdParamMap<Scalar> replica_param_views(const TrainState<Scalar>& state, const DeviceMesh& mesh,
                                         int dp_index) {
  SpmdParamMap<Scalar> views;
  views.reserve(state.names.size());
  for (std::size_t p = 0; p < state.names.size(); ++p) {
    SpmdParamView<Scalar> view;
    view.partition = state.partitions[p];
    view.shards.reserve(static_cast<std::size_t>(mesh.mp_size()));
    for (int j = 0; j < mesh.mp_size(); ++j) {
      view.shards.push_back(&state.params[p][static_cast<std::size_t>(mesh.device_id(dp_index, j))]);
    }
    views.emplace(state.names[p], std::move(view));
  }
  return views;
}

template <typename Scalar>
DeviceGrads<Scalar> zero_grads_like(const TrainState<Scalar>& state) {
  DeviceGrads<Scalar> grads;
  grads.reserve(state.params.size());
  for (const auto& per_device : state.params) {
    std::vector<Tensor<Scalar>> zeros;
    zeros.reserve(per_device.size());
    for (const auto& t : per_device) zeros.push_back(Tensor<Scalar>::zeros(t.shape()));
    grads.push_back(std::move(zeros));
  }
  return grads;
}

/// Adds one replica's per-parameter gradients (as returned by the SPMD
/// backward pass) into the accumulation buffers at that replica's devices.
template <typename Scalar>
void add_replica_grads(DeviceGrads<Scalar>& acc, const TrainState<Scalar>& state,
                       const DeviceMesh& mesh, int dp_index,
                       const std::vector<std::pair<std::string, ShardedTensor<Scalar>>>& grads) {
  for (const auto& [name, grad] : grads) {
    const std::size_t p = state.param_index(name);
    for (int j = 0; j < mesh.mp_size(); ++j) {
      Tensor<Scalar>& slot = acc[p][static_cast<std::size_t>(mesh.device_id(dp_index, j))];
      const Tensor<Scalar>& add = grad.shards[static_cast<std::size_t>(j)];
      if (slot.shape() != add.shape()) {
        throw ShapeError("add_replica_grads: gradient for '" + name + "' has local shape " +
                         shape_str(add.shape()) + ", expected " + shape_str(slot.shape()));
      }
      slot.arr() += add.arr();
    }
  }
}

template <typename Scalar>
void scale_grads(DeviceGrads<Scalar>& grads, double factor) {
  for (auto& per_device : grads) {
    for (auto& g : per_device) g.arr() *= static_cast<Scalar>(factor);
  }
}

/// Averages gradients across the data-parallel axis: one all-reduce per
/// (parameter, model-shard) pair over the strided replica group, then a
/// divide by dp_size. A single replica is a no-op.
template <typename Scalar>
void dp_sync_grads(DeviceGrads<Scalar>& grads, const DeviceMesh& mesh, CommReport* report) {
  if (mesh.dp_size() == 1) return;
  for (auto& per_device : grads) {
    for (int j = 0; j < mesh.mp_size(); ++j) {
      const std::vector<int> group = mesh.dp_group(j);
      std::vector<Tensor<Scalar>*> bufs;
      bufs.reserve(group.size());
      for (int id : group) bufs.push_back(&per_device[static_cast<std::size_t>(id)]);
      all_reduce_sum(bufs, mesh, group, report);
      for (Tensor<Scalar>* b : bufs) {
        b->arr() /= static_cast<Scalar>(mesh.dp_size());
      }
    }
  }
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One bias-corrected decoupled-weight-decay update, applied shard-locally
/// (moments share their parameter's partition, so no collective is needed).
/// Increments step by exactly 1.
template <typename Scalar>
void adamw_step(TrainState<Scalar>& state, const DeviceGrads<Scalar>& grads,
                const AdamWConfig& cfg, bool check_finite = true) {
  if (grads.size() != state.params.size()) {
    throw ShapeError("adamw_step: " + std::to_string(grads.size()) + " gradient buffers for " +
                     std::to_string(state.params.size()) + " parameters");
  }
  const auto t = static_cast<double>(state.step + 1);
  const auto correction1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, t));
  const auto correction2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, t));
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const auto lr = static_cast<Scalar>(cfg.lr);
  const auto eps = static_cast<Scalar>(cfg.eps);
  const auto wd = static_cast<Scalar>(cfg.weight_decay);

  for (std::size_t p = 0; p < state.params.size(); ++p) {
    for (std::size_t d = 0; d < state.params[p].size(); ++d) {
      const Tensor<Scalar>& g = grads[p][d];
      if (g.shape() != state.params[p][d].shape()) {
        throw ShapeError("adamw_step: gradient for '" + state.names[p] + "' has shape " +
                         shape_str(g.shape()) + ", expected " +
                         shape_str(state.params[p][d].shape()));
      }
      if (check_finite && !g.all_finite()) {
        throw NonFiniteError("adamw_step: non-finite gradient for parameter '" + state.names[p] +
                             "'");
      }
      auto m = state.adam_m[p][d].arr();
      auto v = state.adam_v[p][d].arr();
      auto theta = state.params[p][d].arr();
      m = b1 * m + (Scalar(1) - b1) * g.arr();
      v = b2 * v + (Scalar(1) - b2) * g.arr().square();
      theta -= lr * ((m / correction1) / ((v / correction2).sqrt() + eps) + wd * theta);
    }
  }
  ++state.step;
}

/// Elements held on one device for parameters plus both moment buffers.
template <typename Scalar>
std::int64_t state_elements_on_device(const TrainState<Scalar>& state, int device) {
  std::int64_t total = 0;
  const auto d = static_cast<std::size_t>(device);
  for (std::size_t p = 0; p < state.params.size(); ++p) {
    total += state.params[p][d].numel() + state.adam_m[p][d].numel() + state.adam_v[p][d].numel();
  }
  return total;
}

/// The memory claim in closed form: replicated elements stay whole, split
/// elements shrink by the model-parallel degree, and the three state buffers
/// (params, m, v) triple it.
inline std::int64_t expected_state_elements(const ShardingPlan& plan, const ShapeMap& shapes,
                                            int mp_size) {
  std::int64_t total = 0;
  for (const auto& [name, shape] : shapes) {
    const std::int64_t n = shape_numel(shape);
    const Partition& partition = plan.at(name);
    total += partition.is_split() ? n / mp_size : n;
  }
  return 3 * total;
}

}  // namespace shardweave
