#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "shardweave/autodiff.hpp"
#include "shardweave/eval.hpp"
#include "shardweave/graph.hpp"
#include "shardweave/kernels.hpp"
#include "shardweave/plan.hpp"
#include "shardweave/spmd.hpp"
#include "shardweave/train_state.hpp"

namespace shardweave {

/// Largest relative deviation seen so far and the tensor it came from.
/// Deviations are |a - b| / max(|b|, 1), so small-magnitude tensors are
/// judged on absolute error instead of blowing up near zero.
struct Deviation {
  double value = 0.0;
  std::string tensor;

  void update(double candidate, const std::string& name) {
    if (candidate > value) {
      value = candidate;
      tensor = name;
    }
  }
};

namespace detail {

template <typename Scalar>
double max_rel_deviation(const Tensor<Scalar>& got, const Tensor<Scalar>& want) {
  if (got.shape() != want.shape()) {
    throw ShapeError("audit: comparing tensors of shape " + shape_str(got.shape()) + " and " +
                     shape_str(want.shape()));
  }
  double worst = 0.0;
  for (std::int64_t i = 0; i < got.numel(); ++i) {
    const double a = static_cast<double>(got[i]);
    const double b = static_cast<double>(want[i]);
    const double rel = std::abs(a - b) / std::max(std::abs(b), 1.0);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace detail

struct AuditResult {
  Deviation loss;
  Deviation grads;
  Deviation params;
  CommReport comm;
  int steps = 0;

  double worst() const { return std::max({loss.value, grads.value, params.value}); }
  bool within(double tolerance) const { return worst() <= tolerance; }
};

/// Trains the same graph twice for `steps` optimizer updates: once on a
/// single device, once sharded across the mesh with each data-parallel
/// replica taking an equal batch slice. Records the largest relative
/// deviation in per-step loss, synchronized gradients, and the parameters
/// after every update. The two trajectories are algebraically identical, so
/// any persistent gap points at the sharded execution path.
///
/// The graph must be traced at the per-replica batch size; `batch_for_step`
/// supplies the concatenated global batch (replica count x per-replica
/// rows). The single-device reference walks the same slices sequentially and
/// averages, which is the global-batch mean computed without any sharding
/// machinery.
template <typename Scalar>
AuditResult audit_equivalence(const Graph<Scalar>& graph, int loss_id,
                              const std::vector<std::pair<std::string, int>>& grad_nodes,
                              const std::function<InputMap<Scalar>(int)>& batch_for_step,
                              const ParamTree<Scalar>& init, const ShardingPlan& plan,
                              const DeviceMesh& mesh, const AdamWConfig& optimizer, int steps,
                              const SpmdOptions& options = {}) {
  if (steps < 1) {
    throw ConfigError("audit_equivalence: steps must be positive, got " + std::to_string(steps));
  }
  AuditResult result;
  result.steps = steps;

  const DeviceMesh solo = build_mesh(1, 1, 1);
  TrainState<Scalar> reference = shard_params(init, plan, solo);
  TrainState<Scalar> state = shard_params(init, plan, mesh);
  const int dp = mesh.dp_size();

  std::vector<int> ref_outputs;
  ref_outputs.reserve(grad_nodes.size() + 1);
  ref_outputs.push_back(loss_id);
  for (const auto& [name, id] : grad_nodes) ref_outputs.push_back(id);

  for (int step = 0; step < steps; ++step) {
    const InputMap<Scalar> global = batch_for_step(step);

    ParamTree<Scalar> ref_params = gather_params(reference, solo);
    DeviceGrads<Scalar> ref_grads = zero_grads_like(reference);
    double ref_loss_sum = 0.0;
    for (int r = 0; r < dp; ++r) {
      const InputMap<Scalar> slice = dp == 1 ? global : slice_batch_inputs(global, dp, r);
      std::vector<Tensor<Scalar>> ref_values =
          evaluate(graph, slice, ref_params, ref_outputs, options.eval);
      ref_loss_sum += static_cast<double>(ref_values[0].item());
      for (std::size_t i = 0; i < grad_nodes.size(); ++i) {
        Tensor<Scalar>& slot = ref_grads[reference.param_index(grad_nodes[i].first)][0];
        slot.arr() += ref_values[i + 1].arr();
      }
    }
    const double ref_loss = ref_loss_sum / dp;
    if (dp > 1) scale_grads(ref_grads, 1.0 / dp);

    DeviceGrads<Scalar> acc = zero_grads_like(state);
    double loss_sum = 0.0;
    for (int r = 0; r < dp; ++r) {
      const InputMap<Scalar> replica =
          dp == 1 ? global : slice_batch_inputs(global, dp, r);
      SpmdParamMap<Scalar> views = replica_param_views(state, mesh, r);
      SpmdLossAndGrads<Scalar> sharded = spmd_forward_backward(
          graph, loss_id, grad_nodes, replica, views, mesh, mesh.mp_group(r), &result.comm,
          options);
      loss_sum += static_cast<double>(sharded.loss);
      add_replica_grads(acc, state, mesh, r, sharded.grads);
    }
    const double sharded_loss = loss_sum / dp;
    dp_sync_grads(acc, mesh, &result.comm);

    result.loss.update(std::abs(sharded_loss - ref_loss) / std::max(std::abs(ref_loss), 1.0),
                       "loss@step" + std::to_string(step));
    for (std::size_t p = 0; p < state.names.size(); ++p) {
      ShardedTensor<Scalar> g;
      g.global = state.shapes[p];
      g.partition = state.partitions[p];
      for (int j = 0; j < mesh.mp_size(); ++j) {
        g.shards.push_back(acc[p][static_cast<std::size_t>(mesh.device_id(0, j))]);
      }
      result.grads.update(detail::max_rel_deviation(gather(g), ref_grads[p][0]),
                          "d(" + state.names[p] + ")@step" + std::to_string(step));
    }

    adamw_step(reference, ref_grads, optimizer);
    adamw_step(state, acc, optimizer);

    ParamTree<Scalar> got = gather_params(state, mesh);
    ParamTree<Scalar> want = gather_params(reference, solo);
    for (const auto& [name, tensor] : want.entries()) {
      result.params.update(detail::max_rel_deviation(got.at(name), tensor),
                           name + "@step" + std::to_string(step));
    }
  }
  return result;
}

struct CommComparison {
  CommReport rule;
  CommReport baseline;

  std::uint64_t rule_payload() const { return rule.total().payload_bytes; }
  std::uint64_t baseline_payload() const { return baseline.total().payload_bytes; }
};

/// Runs one forward pass of a two-layer MLP under the alternating-split plan
/// (first kernel split by rows, second by columns) and again under a same-dim
/// baseline that splits both kernels by rows, charging each run for the
/// collectives it triggers. A block hands its output to whatever follows in
/// replicated form, so both runs end by coercing the output onto every rank;
/// under the alternating plan that coercion is the row-parallel all-reduce
/// itself, while the baseline additionally gathers the hidden activations.
template <typename Scalar>
CommComparison compare_fc_pair_comm(std::int64_t batch, std::int64_t d_model, std::int64_t hidden,
                                    int n_shards) {
  GraphBuilder<Scalar> b;
  auto x = b.input("x", {batch, d_model});
  auto w1 = b.param("mlp/fc1/kernel", {hidden, d_model});
  auto w2 = b.param("mlp/fc2/kernel", {d_model, hidden});
  auto y = linear(gelu(linear(x, w1)), w2);

  InputMap<Scalar> inputs;
  inputs.emplace("x", Tensor<Scalar>::full({batch, d_model}, Scalar(0.01)));
  ParamTree<Scalar> params;
  params.add("mlp/fc1/kernel", Tensor<Scalar>::full({hidden, d_model}, Scalar(0.01)));
  params.add("mlp/fc2/kernel", Tensor<Scalar>::full({d_model, hidden}, Scalar(0.01)));

  const DeviceMesh mesh = build_mesh(1, n_shards, 1);
  CommComparison out;
  const auto run = [&](const ShardingPlan& plan, CommReport* report) {
    TrainState<Scalar> state = shard_params(params, plan, mesh);
    SpmdParamMap<Scalar> views = replica_param_views(state, mesh, 0);
    SpmdInterpreter<Scalar> interp(mesh, mesh.mp_group(0), report);
    std::vector<ShardedTensor<Scalar>> values = interp.run(b.graph(), inputs, views, {y.id});
    interp.to_replicated(values[0]);
  };

  ShardingPlan rule = derive_plan(params, n_shards);
  run(rule, &out.rule);

  ShardingPlan baseline;
  baseline.n_shards = n_shards;
  baseline.entries.push_back({"mlp/fc1/kernel", Partition::split(0)});
  baseline.entries.push_back({"mlp/fc2/kernel", Partition::split(0)});
  run(baseline, &out.baseline);
  return out;
}

}  // namespace shardweave
