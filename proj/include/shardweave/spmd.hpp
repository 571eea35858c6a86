#pragma once

#include <future>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "shardweave/collectives.hpp"
#include "shardweave/errors.hpp"
#include "shardweave/eval.hpp"
#include "shardweave/graph.hpp"
#include "shardweave/kernels.hpp"
#include "shardweave/mesh.hpp"
#include "shardweave/partition.hpp"
#include "shardweave/sharded_tensor.hpp"
#include "shardweave/tensor.hpp"

namespace shardweave {

struct SpmdOptions {
  EvalOptions eval;
  /// Runs per-device compute on worker threads. Collectives stay on the
  /// calling thread with fixed reduction order, so results are bitwise
  /// identical to the lockstep loop.
  bool worker_threads = false;
};

/// One parameter as the executor sees it: its layout plus one local tensor
/// per model-parallel rank (aligned with the device group).
template <typename Scalar>
struct SpmdParamView {
  Partition partition;
  std::vector<const Tensor<Scalar>*> shards;
};

template <typename Scalar>
using SpmdParamMap = std::unordered_map<std::string, SpmdParamView<Scalar>>;

namespace detail {

/// Maps a split dim through a reshape: returns the output dim whose local
/// reshape keeps every element on its device, or -1 when the split cannot be
/// tracked (the caller then gathers). Handles the flatten/unflatten and
/// head-split/merge patterns: the output dim must sit at the same flattened
/// offset and either factor the split dim or absorb a whole run of input
/// dims starting with it.
inline std::int64_t map_reshape_split(const Shape& in, const Shape& out, std::int64_t d,
                                      int n_shards) {
  std::int64_t prefix = 1;
  for (std::int64_t i = 0; i < d; ++i) prefix *= in[static_cast<std::size_t>(i)];
  std::int64_t acc = 1;
  std::size_t j = 0;
  while (j < out.size() && acc < prefix) {
    acc *= out[j];
    ++j;
  }
  if (acc != prefix || j >= out.size()) return -1;

  const std::int64_t s = in[static_cast<std::size_t>(d)];
  std::int64_t prod = 1;
  for (std::size_t e = j; e < out.size() && prod < s; ++e) prod *= out[e];
  if (prod == s) {
    return out[j] % n_shards == 0 ? static_cast<std::int64_t>(j) : -1;
  }
  prod = 1;
  for (std::size_t e = static_cast<std::size_t>(d); e < in.size() && prod < out[j]; ++e) {
    prod *= in[e];
  }
  if (prod == out[j]) return static_cast<std::int64_t>(j);
  return -1;
}

}  // namespace detail

/// Executes op graphs across one model-parallel device group, keeping a
/// partition per value and inserting collectives where an op needs data it
/// does not hold locally. With a singleton group this degenerates to the
/// reference interpreter (collectives become free identities), which is what
/// makes the single-device oracle comparable.
template <typename Scalar>
class SpmdInterpreter {
 public:
  SpmdInterpreter(const DeviceMesh& mesh, std::vector<int> group, CommReport* report,
                  SpmdOptions options = {})
      : mesh_(&mesh), group_(std::move(group)), report_(report), options_(options) {
    if (group_.empty()) {
      throw PartitionError("SpmdInterpreter: device group is empty");
    }
  }

  int n_shards() const { return static_cast<int>(group_.size()); }

  /// Runs the whole graph and returns the values of `outputs` in order.
  /// Inputs are logical host tensors, replicated onto every rank.
  std::vector<ShardedTensor<Scalar>> run(const Graph<Scalar>& graph,
                                         const InputMap<Scalar>& inputs,
                                         const SpmdParamMap<Scalar>& params,
                                         const std::vector<int>& outputs) {
    std::vector<ShardedTensor<Scalar>> values;
    values.reserve(graph.nodes.size());
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
      const Node& node = graph.nodes[i];
      values.push_back(exec_node(graph, node, inputs, params, values));
      if (options_.eval.check_finite && !node.integer_valued) {
        for (const auto& shard : values.back().shards) {
          if (!shard.all_finite()) {
            throw NonFiniteError(std::string("spmd: non-finite value from op '") +
                                 op_name(node.kind) + "' (node " + std::to_string(i) +
                                 (node.name.empty() ? "" : ", '" + node.name + "'") + ")");
          }
        }
      }
    }
    std::vector<ShardedTensor<Scalar>> result;
    result.reserve(outputs.size());
    for (int id : outputs) result.push_back(values.at(static_cast<std::size_t>(id)));
    return result;
  }

  /// Gathers a split value so every rank holds the full tensor. Free for
  /// replicated values; partial sums are all-reduced.
  void to_replicated(ShardedTensor<Scalar>& v) {
    if (v.partition.is_replicated()) return;
    if (v.partition.is_partial()) {
      reduce_partials(v);
      return;
    }
    std::vector<Tensor<Scalar>*> bufs = shard_ptrs(v);
    all_gather(bufs, v.partition.dim, *mesh_, group_, report_);
    v.partition = Partition::replicated();
  }

  /// Re-partitions a value to Split(dim). Slicing a replicated value is
  /// local and free; anything else gathers first.
  void to_split(ShardedTensor<Scalar>& v, std::int64_t dim) {
    if (v.partition.is_split() && v.partition.dim == dim) return;
    to_replicated(v);
    const Shape local = local_shape(v.global, Partition::split(dim), n_shards());
    const std::int64_t chunk = local[static_cast<std::size_t>(dim)];
    for_each_rank([&](int r) {
      v.shards[static_cast<std::size_t>(r)] =
          kernels::slice(v.shards[static_cast<std::size_t>(r)], dim, r * chunk, chunk);
    });
    v.partition = Partition::split(dim);
  }

  void to_partition(ShardedTensor<Scalar>& v, const Partition& target) {
    if (target.is_split()) {
      to_split(v, target.dim);
    } else {
      to_replicated(v);
    }
  }

  /// Sums per-rank partial results into a replicated value via one
  /// all-reduce.
  void reduce_partials(ShardedTensor<Scalar>& v) {
    std::vector<Tensor<Scalar>*> bufs = shard_ptrs(v);
    all_reduce_sum(bufs, *mesh_, group_, report_);
    v.partition = Partition::replicated();
  }

  /// Strict column-parallel linear: replicated activations against a
  /// Split(0) kernel, output split along the feature dim, no collective.
  ShardedTensor<Scalar> column_parallel_linear(const ShardedTensor<Scalar>& x,
                                               const ShardedTensor<Scalar>& w,
                                               const ShardedTensor<Scalar>* b) {
    if (!x.partition.is_replicated()) {
      throw PartitionError("column_parallel_linear: expected replicated activations, got " +
                           x.partition.describe());
    }
    if (!(w.partition == Partition::split(0))) {
      throw PartitionError("column_parallel_linear: expected kernel split:0, got " +
                           w.partition.describe());
    }
    ShardedTensor<Scalar> xc = x;
    ShardedTensor<Scalar> wc = w;
    ShardedTensor<Scalar> bc;
    if (b != nullptr) bc = *b;
    return linear_onto(xc, wc, b != nullptr ? &bc : nullptr, Shape{});
  }

  /// Strict row-parallel linear: feature-split activations against a
  /// Split(1) kernel, replicated output via exactly one all-reduce.
  ShardedTensor<Scalar> row_parallel_linear(const ShardedTensor<Scalar>& x,
                                            const ShardedTensor<Scalar>& w,
                                            const ShardedTensor<Scalar>* b) {
    const auto feature_dim = static_cast<std::int64_t>(x.global.size()) - 1;
    if (!(x.partition == Partition::split(feature_dim))) {
      throw PartitionError("row_parallel_linear: expected activations split:" +
                           std::to_string(feature_dim) + ", got " + x.partition.describe());
    }
    if (!(w.partition == Partition::split(1))) {
      throw PartitionError("row_parallel_linear: expected kernel split:1, got " +
                           w.partition.describe());
    }
    ShardedTensor<Scalar> xc = x;
    ShardedTensor<Scalar> wc = w;
    ShardedTensor<Scalar> bc;
    if (b != nullptr) bc = *b;
    return linear_onto(xc, wc, b != nullptr ? &bc : nullptr, Shape{});
  }

 private:
  using Value = ShardedTensor<Scalar>;

  static std::vector<Tensor<Scalar>*> shard_ptrs(Value& v) {
    std::vector<Tensor<Scalar>*> bufs;
    bufs.reserve(v.shards.size());
    for (auto& s : v.shards) bufs.push_back(&s);
    return bufs;
  }

  template <typename Fn>
  void for_each_rank(Fn&& fn) {
    const int n = n_shards();
    if (options_.worker_threads && n > 1) {
      std::vector<std::future<void>> tasks;
      tasks.reserve(static_cast<std::size_t>(n));
      for (int r = 0; r < n; ++r) {
        tasks.push_back(std::async(std::launch::async, [&fn, r] { fn(r); }));
      }
      for (auto& t : tasks) t.get();
    } else {
      for (int r = 0; r < n; ++r) fn(r);
    }
  }

  Value replicate(const Tensor<Scalar>& t) {
    Value v;
    v.global = t.shape();
    v.partition = Partition::replicated();
    v.shards.assign(static_cast<std::size_t>(n_shards()), t);
    return v;
  }

  /// Per-rank apply_node once partitions are aligned; the caller states the
  /// result's partition. The global shape comes from the node declaration.
  Value apply_local(const Node& node, const std::vector<Value*>& in, Partition partition) {
    Value out;
    out.global = node.shape;
    out.partition = partition;
    out.shards.resize(static_cast<std::size_t>(n_shards()));
    for_each_rank([&](int r) {
      std::vector<const Tensor<Scalar>*> locals;
      locals.reserve(in.size());
      for (Value* v : in) locals.push_back(&v->shards[static_cast<std::size_t>(r)]);
      out.shards[static_cast<std::size_t>(r)] = apply_node<Scalar>(node, locals);
    });
    return out;
  }

  /// Aligns two same-shape values onto one partition, preferring the free
  /// local slice over a gather.
  Partition align_same_shape(Value& a, Value& b) {
    if (a.partition == b.partition) return a.partition;
    if (a.partition.is_split() && b.partition.is_replicated()) {
      to_split(b, a.partition.dim);
      return a.partition;
    }
    if (a.partition.is_replicated() && b.partition.is_split()) {
      to_split(a, b.partition.dim);
      return b.partition;
    }
    to_replicated(a);
    to_replicated(b);
    return Partition::replicated();
  }

  /// Shared linear executor. Decides column-, row-, batch-parallel, or
  /// replicated execution from the operand partitions; mutates its inputs
  /// only through the free-or-collective coercions.
  Value linear_onto(Value& x, Value& w, Value* b, const Shape& declared) {
    const auto out_rank = static_cast<std::int64_t>(x.global.size());
    const std::int64_t feature_dim = out_rank - 1;
    Shape out_shape = x.global;
    out_shape[static_cast<std::size_t>(feature_dim)] = w.global[0];
    if (!declared.empty() && declared != out_shape) {
      throw ShapeError("spmd: linear output " + shape_str(out_shape) + " does not match declared " +
                       shape_str(declared));
    }

    if (w.partition == Partition::split(0)) {
      to_replicated(x);
      if (b != nullptr) to_replicated(*b);
      const std::int64_t chunk = w.global[0] / n_shards();
      Value out;
      out.global = out_shape;
      out.partition = Partition::split(feature_dim);
      out.shards.resize(static_cast<std::size_t>(n_shards()));
      for_each_rank([&](int r) {
        const auto rr = static_cast<std::size_t>(r);
        Tensor<Scalar> local_bias;
        const Tensor<Scalar>* bias = nullptr;
        if (b != nullptr) {
          local_bias = kernels::slice(b->shards[rr], 0, r * chunk, chunk);
          bias = &local_bias;
        }
        out.shards[rr] = kernels::linear(x.shards[rr], w.shards[rr], bias);
      });
      return out;
    }

    if (w.partition == Partition::split(1)) {
      to_split(x, feature_dim);
      Value out;
      out.global = out_shape;
      out.partition = Partition::replicated();
      out.shards.resize(static_cast<std::size_t>(n_shards()));
      for_each_rank([&](int r) {
        const auto rr = static_cast<std::size_t>(r);
        out.shards[rr] = kernels::linear<Scalar>(x.shards[rr], w.shards[rr], nullptr);
      });
      reduce_partials(out);
      out.partition = Partition::replicated();
      if (b != nullptr) {
        to_replicated(*b);
        for_each_rank([&](int r) {
          const auto rr = static_cast<std::size_t>(r);
          out.shards[rr] = kernels::add(out.shards[rr], b->shards[rr]);
        });
      }
      return out;
    }

    to_replicated(w);
    if (b != nullptr) to_replicated(*b);
    if (x.partition.is_split() && x.partition.dim == feature_dim) to_replicated(x);
    Value out;
    out.global = out_shape;
    out.partition = x.partition;
    out.shards.resize(static_cast<std::size_t>(n_shards()));
    for_each_rank([&](int r) {
      const auto rr = static_cast<std::size_t>(r);
      out.shards[rr] = kernels::linear(x.shards[rr], w.shards[rr],
                                       b != nullptr ? &b->shards[rr] : nullptr);
    });
    return out;
  }

  Value exec_matmul(const Node& node, Value& a, Value& b) {
    const auto ra = static_cast<std::int64_t>(a.global.size());
    const auto rb = static_cast<std::int64_t>(b.global.size());
    const std::int64_t a_contract = ra - 1;
    const std::int64_t b_contract = rb - 2;

    // Both operands split on the contraction dim: local partial products,
    // one all-reduce.
    if (a.partition == Partition::split(a_contract) && b.partition == Partition::split(b_contract)) {
      std::vector<Value*> in = {&a, &b};
      Value out = apply_local(node, in, Partition::replicated());
      reduce_partials(out);
      return out;
    }
    // Shared batch (or row-block) split on the left, full right operand.
    if (a.partition.is_split() && a.partition.dim != a_contract) {
      if (rb == ra && b.partition == a.partition && a.partition.dim < ra - 2) {
        std::vector<Value*> in = {&a, &b};
        return apply_local(node, in, a.partition);
      }
      if (b.partition.is_replicated()) {
        if (rb == ra && a.partition.dim < ra - 2) to_split(b, a.partition.dim);
        if (b.partition == a.partition || (rb == 2 && a.partition.dim <= ra - 2)) {
          std::vector<Value*> in = {&a, &b};
          return apply_local(node, in, a.partition);
        }
      }
    }
    // Column-block split on the right.
    if (a.partition.is_replicated() && b.partition == Partition::split(rb - 1)) {
      std::vector<Value*> in = {&a, &b};
      const auto out_rank = static_cast<std::int64_t>(node.shape.size());
      return apply_local(node, in, Partition::split(out_rank - 1));
    }
    // Batch split only on the right.
    if (a.partition.is_replicated() && b.partition.is_split() && rb == ra &&
        b.partition.dim < rb - 2) {
      to_split(a, b.partition.dim);
      std::vector<Value*> in = {&a, &b};
      return apply_local(node, in, b.partition);
    }
    to_replicated(a);
    to_replicated(b);
    std::vector<Value*> in = {&a, &b};
    return apply_local(node, in, Partition::replicated());
  }

  /// Elementwise binary with right-aligned broadcast of b into a's shape.
  Value exec_broadcast_binary(const Node& node, Value& a, Value& b) {
    const auto ra = static_cast<std::int64_t>(a.global.size());
    const auto rb = static_cast<std::int64_t>(b.global.size());
    const std::int64_t offset = ra - rb;

    if (a.partition.is_split()) {
      const std::int64_t d = a.partition.dim;
      const std::int64_t db = d - offset;
      if (b.partition.is_replicated()) {
        if (db >= 0 && b.global[static_cast<std::size_t>(db)] != 1) to_split(b, db);
        std::vector<Value*> in = {&a, &b};
        return apply_local(node, in, a.partition);
      }
      if (b.partition.is_split() && b.partition.dim == db) {
        std::vector<Value*> in = {&a, &b};
        return apply_local(node, in, a.partition);
      }
      to_replicated(b);
      return exec_broadcast_binary(node, a, b);
    }
    if (b.partition.is_split()) {
      const std::int64_t d = b.partition.dim + offset;
      if (b.global[static_cast<std::size_t>(b.partition.dim)] ==
          a.global[static_cast<std::size_t>(d)]) {
        to_split(a, d);
        std::vector<Value*> in = {&a, &b};
        return apply_local(node, in, a.partition);
      }
      to_replicated(b);
    }
    std::vector<Value*> in = {&a, &b};
    return apply_local(node, in, Partition::replicated());
  }

  Value exec_reduce(const Node& node, Value& x) {
    const bool mean = node.kind == OpKind::kReduceMean;
    if (x.partition.is_split()) {
      const std::int64_t d = x.partition.dim;
      bool reduced = false;
      std::int64_t axes_before = 0;
      for (std::int64_t axis : node.iattrs) {
        if (axis == d) reduced = true;
        if (axis < d) ++axes_before;
      }
      if (!reduced) {
        std::vector<Value*> in = {&x};
        const std::int64_t out_dim = node.flag ? d : d - axes_before;
        return apply_local(node, in, Partition::split(out_dim));
      }
      // Reducing across the split dim: local sums, one all-reduce, then the
      // mean divisor over the full extent.
      Value out;
      out.global = node.shape;
      out.partition = Partition::replicated();
      out.shards.resize(static_cast<std::size_t>(n_shards()));
      for_each_rank([&](int r) {
        const auto rr = static_cast<std::size_t>(r);
        out.shards[rr] = kernels::reduce_sum(x.shards[rr], node.iattrs, node.flag);
      });
      reduce_partials(out);
      if (mean) {
        std::int64_t count = 1;
        for (std::int64_t axis : node.iattrs) count *= x.global[static_cast<std::size_t>(axis)];
        for_each_rank([&](int r) {
          const auto rr = static_cast<std::size_t>(r);
          out.shards[rr] = kernels::mul_scalar(out.shards[rr], 1.0 / static_cast<double>(count));
        });
      }
      return out;
    }
    std::vector<Value*> in = {&x};
    return apply_local(node, in, Partition::replicated());
  }

  Value exec_reshape(const Node& node, Value& x) {
    if (x.partition.is_split()) {
      const std::int64_t mapped =
          detail::map_reshape_split(x.global, node.shape, x.partition.dim, n_shards());
      if (mapped >= 0) {
        Shape local = node.shape;
        local[static_cast<std::size_t>(mapped)] /= n_shards();
        Value out;
        out.global = node.shape;
        out.partition = Partition::split(mapped);
        out.shards.resize(static_cast<std::size_t>(n_shards()));
        for_each_rank([&](int r) {
          const auto rr = static_cast<std::size_t>(r);
          out.shards[rr] = kernels::reshape(x.shards[rr], local);
        });
        return out;
      }
      to_replicated(x);
    }
    std::vector<Value*> in = {&x};
    return apply_local(node, in, Partition::replicated());
  }

  Value exec_broadcast_to(const Node& node, Value& x) {
    if (x.partition.is_split()) {
      const std::int64_t offset =
          static_cast<std::int64_t>(node.shape.size()) - static_cast<std::int64_t>(x.global.size());
      const std::int64_t out_dim = x.partition.dim + offset;
      Shape local = node.shape;
      local[static_cast<std::size_t>(out_dim)] /= n_shards();
      Value out;
      out.global = node.shape;
      out.partition = Partition::split(out_dim);
      out.shards.resize(static_cast<std::size_t>(n_shards()));
      for_each_rank([&](int r) {
        const auto rr = static_cast<std::size_t>(r);
        out.shards[rr] = kernels::broadcast_to(x.shards[rr], local);
      });
      return out;
    }
    std::vector<Value*> in = {&x};
    return apply_local(node, in, Partition::replicated());
  }

  Value exec_node(const Graph<Scalar>& graph, const Node& node, const InputMap<Scalar>& inputs,
                  const SpmdParamMap<Scalar>& params, std::vector<Value>& values) {
    const auto operand = [&](int slot) -> Value& {
      return values[static_cast<std::size_t>(node.inputs[static_cast<std::size_t>(slot)])];
    };

    switch (node.kind) {
      case OpKind::kInput: {
        auto it = inputs.find(node.name);
        if (it == inputs.end()) {
          throw ShapeError("spmd: input '" + node.name + "' not bound");
        }
        if (it->second.shape() != node.shape) {
          throw ShapeError("spmd: input '" + node.name + "' bound with shape " +
                           shape_str(it->second.shape()) + ", declared " + shape_str(node.shape));
        }
        return replicate(it->second);
      }
      case OpKind::kConst:
        return replicate(graph.consts[static_cast<std::size_t>(node.const_index)]);
      case OpKind::kParam: {
        auto it = params.find(node.name);
        if (it == params.end()) {
          throw ShapeError("spmd: param '" + node.name + "' not bound");
        }
        const SpmdParamView<Scalar>& view = it->second;
        if (static_cast<int>(view.shards.size()) != n_shards()) {
          throw PartitionError("spmd: param '" + node.name + "' provides " +
                               std::to_string(view.shards.size()) + " shards for a group of " +
                               std::to_string(n_shards()));
        }
        const Shape local = local_shape(node.shape, view.partition, n_shards());
        Value v;
        v.global = node.shape;
        v.partition = view.partition;
        v.shards.reserve(view.shards.size());
        for (const Tensor<Scalar>* shard : view.shards) {
          if (shard->shape() != local) {
            throw PartitionError("spmd: param '" + node.name + "' shard has shape " +
                                 shape_str(shard->shape()) + ", expected " + shape_str(local));
          }
          v.shards.push_back(*shard);
        }
        return v;
      }

      case OpKind::kLinear: {
        Value& x = operand(0);
        Value& w = operand(1);
        Value* b = node.inputs.size() == 3 ? &operand(2) : nullptr;
        return linear_onto(x, w, b, node.shape);
      }
      case OpKind::kMatmul:
        return exec_matmul(node, operand(0), operand(1));

      case OpKind::kAdd:
      case OpKind::kMul:
      case OpKind::kDiv:
        return exec_broadcast_binary(node, operand(0), operand(1));

      case OpKind::kAddScalar:
      case OpKind::kMulScalar:
      case OpKind::kGelu:
      case OpKind::kRelu:
      case OpKind::kStopGradient: {
        Value& x = operand(0);
        std::vector<Value*> in = {&x};
        return apply_local(node, in, x.partition);
      }

      case OpKind::kGeluGrad:
      case OpKind::kReluGrad: {
        Value& x = operand(0);
        Value& dy = operand(1);
        const Partition common = align_same_shape(x, dy);
        std::vector<Value*> in = {&x, &dy};
        return apply_local(node, in, common);
      }

      case OpKind::kLayerNorm: {
        Value& x = operand(0);
        Value& scale = operand(1);
        Value& bias = operand(2);
        to_replicated(scale);
        to_replicated(bias);
        if (x.partition.is_split() &&
            x.partition.dim == static_cast<std::int64_t>(x.global.size()) - 1) {
          to_replicated(x);
        }
        std::vector<Value*> in = {&x, &scale, &bias};
        return apply_local(node, in, x.partition);
      }
      case OpKind::kLayerNormXhat: {
        Value& x = operand(0);
        if (x.partition.is_split() &&
            x.partition.dim == static_cast<std::int64_t>(x.global.size()) - 1) {
          to_replicated(x);
        }
        std::vector<Value*> in = {&x};
        return apply_local(node, in, x.partition);
      }
      case OpKind::kLayerNormGradX: {
        Value& x = operand(0);
        Value& scale = operand(1);
        Value& dy = operand(2);
        to_replicated(scale);
        if (x.partition.is_split() &&
            x.partition.dim == static_cast<std::int64_t>(x.global.size()) - 1) {
          to_replicated(x);
        }
        if (dy.partition.is_split() &&
            dy.partition.dim == static_cast<std::int64_t>(dy.global.size()) - 1) {
          to_replicated(dy);
        }
        const Partition common = align_same_shape(x, dy);
        std::vector<Value*> in = {&x, &scale, &dy};
        return apply_local(node, in, common);
      }

      case OpKind::kEmbedLookup: {
        Value& table = operand(0);
        Value& ids = operand(1);
        to_replicated(table);
        std::vector<Value*> in = {&table, &ids};
        return apply_local(node, in, ids.partition);
      }
      case OpKind::kEmbedLookupGrad: {
        Value& ids = operand(0);
        Value& dy = operand(1);
        to_replicated(ids);
        to_replicated(dy);
        std::vector<Value*> in = {&ids, &dy};
        return apply_local(node, in, Partition::replicated());
      }

      case OpKind::kSoftmax:
      case OpKind::kArgmax: {
        Value& x = operand(0);
        if (x.partition.is_split() &&
            x.partition.dim == static_cast<std::int64_t>(x.global.size()) - 1) {
          to_replicated(x);
        }
        std::vector<Value*> in = {&x};
        return apply_local(node, in, x.partition);
      }

      case OpKind::kSoftmaxXent: {
        Value& logits = operand(0);
        Value& labels = operand(1);
        if (logits.partition.is_split() &&
            logits.partition.dim == static_cast<std::int64_t>(logits.global.size()) - 1) {
          to_replicated(logits);
        }
        if (logits.partition.is_split() && labels.partition == logits.partition) {
          std::vector<Value*> in = {&logits, &labels};
          return apply_local(node, in, logits.partition);
        }
        if (logits.partition.is_split() && labels.partition.is_replicated()) {
          to_split(labels, logits.partition.dim);
          std::vector<Value*> in = {&logits, &labels};
          return apply_local(node, in, logits.partition);
        }
        to_replicated(logits);
        to_replicated(labels);
        std::vector<Value*> in = {&logits, &labels};
        return apply_local(node, in, Partition::replicated());
      }
      case OpKind::kSoftmaxXentGrad: {
        Value& logits = operand(0);
        Value& labels = operand(1);
        Value& dy = operand(2);
        to_replicated(logits);
        to_replicated(labels);
        to_replicated(dy);
        std::vector<Value*> in = {&logits, &labels, &dy};
        return apply_local(node, in, Partition::replicated());
      }

      case OpKind::kReshape:
        return exec_reshape(node, operand(0));
      case OpKind::kBroadcastTo:
        return exec_broadcast_to(node, operand(0));
      case OpKind::kTranspose: {
        Value& x = operand(0);
        if (x.partition.is_split()) {
          std::int64_t mapped = -1;
          for (std::size_t j = 0; j < node.iattrs.size(); ++j) {
            if (node.iattrs[j] == x.partition.dim) {
              mapped = static_cast<std::int64_t>(j);
              break;
            }
          }
          std::vector<Value*> in = {&x};
          return apply_local(node, in, Partition::split(mapped));
        }
        std::vector<Value*> in = {&x};
        return apply_local(node, in, Partition::replicated());
      }

      case OpKind::kReduceSum:
      case OpKind::kReduceMean:
        return exec_reduce(node, operand(0));

      case OpKind::kConcat: {
        Value& a = operand(0);
        Value& b = operand(1);
        const std::int64_t axis = node.iattrs[0];
        if (a.partition.is_split() && a.partition.dim != axis && b.partition == a.partition) {
          std::vector<Value*> in = {&a, &b};
          return apply_local(node, in, a.partition);
        }
        to_replicated(a);
        to_replicated(b);
        std::vector<Value*> in = {&a, &b};
        return apply_local(node, in, Partition::replicated());
      }
      case OpKind::kSlice: {
        Value& x = operand(0);
        const std::int64_t axis = node.iattrs[0];
        if (x.partition.is_split() && x.partition.dim == axis) to_replicated(x);
        std::vector<Value*> in = {&x};
        return apply_local(node, in, x.partition);
      }
      case OpKind::kSliceGrad: {
        Value& dy = operand(0);
        const std::int64_t axis = node.iattrs[0];
        if (dy.partition.is_split() && dy.partition.dim == axis) to_replicated(dy);
        std::vector<Value*> in = {&dy};
        return apply_local(node, in, dy.partition);
      }
    }
    throw ShapeError(std::string("spmd: op '") + op_name(node.kind) + "' has no execution rule");
  }

  const DeviceMesh* mesh_;
  std::vector<int> group_;
  CommReport* report_;
  SpmdOptions options_;
};

/// Cuts every input along its leading (batch) dimension into `parts` equal
/// pieces and returns piece `index`. All inputs must share a batch size
/// divisible by `parts`.
template <typename Scalar>
InputMap<Scalar> slice_batch_inputs(const InputMap<Scalar>& inputs, int parts, int index) {
  if (parts < 1 || index < 0 || index >= parts) {
    throw ConfigError("slice_batch_inputs: bad slice " + std::to_string(index) + "/" +
                      std::to_string(parts));
  }
  InputMap<Scalar> out;
  out.reserve(inputs.size());
  for (const auto& [name, tensor] : inputs) {
    if (tensor.rank() == 0 || tensor.dim(0) % parts != 0) {
      throw ShapeError("slice_batch_inputs: input '" + name + "' with shape " +
                       shape_str(tensor.shape()) + " cannot be cut into " + std::to_string(parts) +
                       " batch slices");
    }
    const std::int64_t chunk = tensor.dim(0) / parts;
    out.emplace(name, kernels::slice(tensor, 0, index * chunk, chunk));
  }
  return out;
}

template <typename Scalar>
struct SpmdLossAndGrads {
  Scalar loss = Scalar(0);
  std::vector<std::pair<std::string, ShardedTensor<Scalar>>> grads;
};

/// Runs forward and backward across one model-parallel group: evaluates the
/// loss node plus every gradient node and coerces each gradient onto its
/// parameter's partition (a gradient for a replicated parameter arriving
/// split is all-gathered; one for a split parameter arriving replicated is
/// sliced locally for free).
template <typename Scalar>
SpmdLossAndGrads<Scalar> spmd_forward_backward(
    const Graph<Scalar>& graph, int loss_node,
    const std::vector<std::pair<std::string, int>>& grad_nodes, const InputMap<Scalar>& inputs,
    const SpmdParamMap<Scalar>& params, const DeviceMesh& mesh, const std::vector<int>& group,
    CommReport* report, const SpmdOptions& options = {}) {
  SpmdInterpreter<Scalar> interpreter(mesh, group, report, options);
  std::vector<int> outputs;
  outputs.reserve(grad_nodes.size() + 1);
  outputs.push_back(loss_node);
  for (const auto& [name, id] : grad_nodes) outputs.push_back(id);
  std::vector<ShardedTensor<Scalar>> values = interpreter.run(graph, inputs, params, outputs);

  SpmdLossAndGrads<Scalar> out;
  interpreter.to_replicated(values[0]);
  if (values[0].shards[0].numel() != 1) {
    throw ShapeError("spmd_forward_backward: loss has shape " +
                     shape_str(values[0].shards[0].shape()) + ", expected a scalar");
  }
  out.loss = values[0].shards[0].item();
  out.grads.reserve(grad_nodes.size());
  for (std::size_t i = 0; i < grad_nodes.size(); ++i) {
    const std::string& name = grad_nodes[i].first;
    const auto it = params.find(name);
    if (it == params.end()) {
      throw ShapeError("spmd_forward_backward: gradient target '" + name + "' is not a parameter");
    }
    ShardedTensor<Scalar>& g = values[i + 1];
    interpreter.to_partition(g, it->second.partition);
    out.grads.emplace_back(name, std::move(g));
  }
  return out;
}

}  // namespace shardweave
