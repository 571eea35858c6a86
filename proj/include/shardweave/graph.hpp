#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "shardweave/tensor.hpp"

namespace shardweave {

enum class OpKind : std::uint8_t {
  kInput,
  kParam,
  kConst,
  kLinear,
  kMatmul,
  kAdd,
  kMul,
  kDiv,
  kAddScalar,
  kMulScalar,
  kGelu,
  kRelu,
  kLayerNorm,
  kEmbedLookup,
  kSoftmax,
  kSoftmaxXent,
  kReshape,
  kTranspose,
  kReduceSum,
  kReduceMean,
  kBroadcastTo,
  kStopGradient,
  kConcat,
  kSlice,
  kArgmax,
  // Backward-only kinds, emitted by grad(). They have no VJPs themselves:
  // the framework is first-order.
  kGeluGrad,
  kReluGrad,
  kLayerNormGradX,
  kLayerNormXhat,
  kSoftmaxXentGrad,
  kEmbedLookupGrad,
  kSliceGrad,
};

/// One op record. `shape` is the logical (unsharded) output shape, fixed at
/// trace time. Attribute slots are shared across ops: `iattrs` holds permutations,
/// axes, or slice bounds; `fattr` holds scalar operands; `flag` holds keepdims.
struct Node {
  OpKind kind = OpKind::kConst;
  std::vector<int> inputs;
  Shape shape;
  bool integer_valued = false;
  std::string name;  // kInput / kParam
  double fattr = 0.0;
  std::vector<std::int64_t> iattrs;
  bool flag = false;
  int const_index = -1;
};

/// Topologically ordered op graph: node inputs always precede the node.
/// A graph is a pure program; replaying it on the same inputs reproduces
/// identical outputs bit for bit.
///
/// Nodes live in a deque so that references and shape views handed out during
/// tracing stay valid while further nodes are appended.
template <typename Scalar>
struct Graph {
  std::deque<Node> nodes;
  std::vector<Tensor<Scalar>> consts;

  const Node& node(int id) const { return nodes.at(static_cast<std::size_t>(id)); }

  bool topologically_valid() const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      for (int in : nodes[i].inputs) {
        if (in < 0 || static_cast<std::size_t>(in) >= i) return false;
      }
    }
    return true;
  }
};

template <typename Scalar>
class GraphBuilder;

/// Handle to a node during tracing. Free functions over Vals append nodes to
/// the underlying builder and infer shapes eagerly, so shape errors surface at
/// the op that caused them.
template <typename Scalar>
struct Val {
  GraphBuilder<Scalar>* builder = nullptr;
  int id = -1;

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  bool integer_valued() const;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

/// Right-aligned broadcast of b into a: every trailing dim of b must equal the
/// corresponding dim of a or be 1. Missing leading dims of b broadcast freely.
inline bool broadcastable_into(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const std::int64_t bd = b[b.size() - 1 - i];
    const std::int64_t ad = a[a.size() - 1 - i];
    if (bd != ad && bd != 1) return false;
  }
  return true;
}

inline Shape reduce_shape(const Shape& in, const std::vector<std::int64_t>& axes, bool keepdims) {
  Shape out;
  for (std::size_t d = 0; d < in.size(); ++d) {
    const bool reduced = std::find(axes.begin(), axes.end(), static_cast<std::int64_t>(d)) != axes.end();
    if (!reduced) {
      out.push_back(in[d]);
    } else if (keepdims) {
      out.push_back(1);
    }
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
class GraphBuilder {
 public:
  GraphBuilder() = default;

  Graph<Scalar>& graph() { return graph_; }
  const Graph<Scalar>& graph() const { return graph_; }
  Graph<Scalar> take() { return std::move(graph_); }

  const Shape& shape(int id) const { return graph_.nodes[static_cast<std::size_t>(id)].shape; }

  Val<Scalar> input(const std::string& name, Shape shape, bool integer_valued = false) {
    auto it = named_.find(name);
    if (it != named_.end()) {
      throw ShapeError("input: name '" + name + "' already declared");
    }
    Node n;
    n.kind = OpKind::kInput;
    n.name = name;
    n.shape = std::move(shape);
    n.integer_valued = integer_valued;
    return push(std::move(n));
  }

  /// Declares a parameter leaf. Re-declaring the same name returns the
  /// existing node (shapes must agree).
  Val<Scalar> param(const std::string& name, const Shape& shape) {
    auto it = named_.find(name);
    if (it != named_.end()) {
      const Node& existing = graph_.nodes[static_cast<std::size_t>(it->second)];
      detail::require(existing.kind == OpKind::kParam && existing.shape == shape,
                      "param: redeclaration of '" + name + "' with shape " + shape_str(shape) +
                          " (was " + shape_str(existing.shape) + ")");
      return Val<Scalar>{this, it->second};
    }
    Node n;
    n.kind = OpKind::kParam;
    n.name = name;
    n.shape = shape;
    return push(std::move(n));
  }

  Val<Scalar> constant(Tensor<Scalar> value, bool integer_valued = false) {
    Node n;
    n.kind = OpKind::kConst;
    n.shape = value.shape();
    n.integer_valued = integer_valued;
    n.const_index = static_cast<int>(graph_.consts.size());
    graph_.consts.push_back(std::move(value));
    return push(std::move(n));
  }

  Val<Scalar> push(Node node) {
    const int id = static_cast<int>(graph_.nodes.size());
    if (node.kind == OpKind::kInput || node.kind == OpKind::kParam) {
      named_[node.name] = id;
    }
    graph_.nodes.push_back(std::move(node));
    return Val<Scalar>{this, id};
  }

  const Node& node(int id) const { return graph_.node(id); }

  /// Node id of a declared input or param, or -1.
  int lookup(const std::string& name) const {
    auto it = named_.find(name);
    return it == named_.end() ? -1 : it->second;
  }

 private:
  Graph<Scalar> graph_;
  std::unordered_map<std::string, int> named_;
};

template <typename Scalar>
const Shape& Val<Scalar>::shape() const {
  return builder->shape(id);
}

template <typename Scalar>
bool Val<Scalar>::integer_valued() const {
  return builder->node(id).integer_valued;
}

// ---------------------------------------------------------------------------
// Trace-level ops. Each infers the output shape and appends one node.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
Val<Scalar> emit(GraphBuilder<Scalar>& b, Node n) {
  return b.push(std::move(n));
}

template <typename Scalar>
GraphBuilder<Scalar>& builder_of(Val<Scalar> a, Val<Scalar> bb) {
  require(a.builder != nullptr && a.builder == bb.builder,
          "op: operands belong to different graphs");
  return *a.builder;
}

}  // namespace detail

/// Elementwise a + b with right-aligned broadcasting of b.
template <typename Scalar>
Val<Scalar> add(Val<Scalar> a, Val<Scalar> b) {
  auto& g = detail::builder_of(a, b);
  detail::require(detail::broadcastable_into(a.shape(), b.shape()),
                  std::string("add: shape mismatch ") + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a.id, b.id};
  n.shape = a.shape();
  return detail::emit(g, std::move(n));
}

template <typename Scalar>
Val<Scalar> mul(Val<Scalar> a, Val<Scalar> b) {
  auto& g = detail::builder_of(a, b);
  detail::require(detail::broadcastable_into(a.shape(), b.shape()),
                  std::string("multiply: shape mismatch ") + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a.id, b.id};
  n.shape = a.shape();
  return detail::emit(g, std::move(n));
}

template <typename Scalar>
Val<Scalar> div(Val<Scalar> a, Val<Scalar> b) {
  auto& g = detail::builder_of(a, b);
  detail::require(detail::broadcastable_into(a.shape(), b.shape()),
                  std::string("divide: shape mismatch ") + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Node n;
  n.kind = OpKind::kDiv;
  n.inputs = {a.id, b.id};
  n.shape = a.shape();
  return detail::emit(g, std::move(n));
}

template <typename Scalar>
Val<Scalar> add_scalar(Val<Scalar> a, double c) {
  Node n;
  n.kind = OpKind::kAddScalar;
  n.inputs = {a.id};
  n.shape = a.shape();
  n.fattr = c;
  return detail::emit(*a.builder, std::move(n));
}

template <typename Scalar>
Val<Scalar> mul_scalar(Val<Scalar> a, double c) {
  Node n;
  n.kind = OpKind::kMulScalar;
  n.inputs = {a.id};
  n.shape = a.shape();
  n.fattr = c;
  return detail::emit(*a.builder, std::move(n));
}

template <typename Scalar>
Val<Scalar> sub(Val<Scalar> a, Val<Scalar> b) {
  return add(a, mul_scalar(b, -1.0));
}

template <typename Scalar>
Val<Scalar> reshape(Val<Scalar> x, Shape target);

/// Matrix product. Either both operands are rank-2 ([m,k] x [k,n]) or both
/// carry identical leading batch dims ([..,m,k] x [..,k,n]).
template <typename Scalar>
Val<Scalar> matmul(Val<Scalar> a, Val<Scalar> b) {
  auto& g = detail::builder_of(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::string err = std::string("matmul: incompatible shapes ") + shape_str(as) + " vs " +
                          shape_str(bs);
  detail::require(as.size() >= 2 && bs.size() >= 2, err);
  Shape out;
  if (as.size() == 2 && bs.size() == 2) {
    detail::require(as[1] == bs[0], err);
    out = {as[0], bs[1]};
  } else if (bs.size() == 2) {
    // [.., m, k] x [k, n]: flatten leading dims, multiply, restore.
    detail::require(as[as.size() - 1] == bs[0], err);
    std::int64_t lead = 1;
    for (std::size_t i = 0; i + 1 < as.size(); ++i) lead *= as[i];
    Val<Scalar> flat = reshape(a, Shape{lead, as[as.size() - 1]});
    Node n;
    n.kind = OpKind::kMatmul;
    n.inputs = {flat.id, b.id};
    n.shape = {lead, bs[1]};
    Val<Scalar> prod = detail::emit(g, std::move(n));
    Shape restored(as.begin(), as.end() - 1);
    restored.push_back(bs[1]);
    return reshape(prod, restored);
  } else {
    detail::require(as.size() == bs.size(), err);
    for (std::size_t i = 0; i + 2 < as.size(); ++i) detail::require(as[i] == bs[i], err);
    detail::require(as[as.size() - 1] == bs[bs.size() - 2], err);
    out = Shape(as.begin(), as.end() - 1);
    out.push_back(bs[bs.size() - 1]);
  }
  Node n;
  n.kind = OpKind::kMatmul;
  n.inputs = {a.id, b.id};
  n.shape = std::move(out);
  return detail::emit(g, std::move(n));
}

/// y = x . W^T + b, with kernel layout [out_features, in_features].
template <typename Scalar>
Val<Scalar> linear(Val<Scalar> x, Val<Scalar> w, const Val<Scalar>* bias = nullptr) {
  auto& g = detail::builder_of(x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require(ws.size() == 2, "linear: kernel must be rank 2 [out,in], got " + shape_str(ws));
  detail::require(!xs.empty() && xs.back() == ws[1],
                  "linear: input " + shape_str(xs) + " does not match kernel " + shape_str(ws) +
                      " (expects trailing dim " + std::to_string(ws[1]) + ")");
  if (bias) {
    detail::require(bias->shape() == Shape{ws[0]},
                    "linear: bias " + shape_str(bias->shape()) + " does not match kernel " +
                        shape_str(ws));
  }
  Node n;
  n.kind = OpKind::kLinear;
  n.inputs = bias ? std::vector<int>{x.id, w.id, bias->id} : std::vector<int>{x.id, w.id};
  Shape out(xs.begin(), xs.end() - 1);
  out.push_back(ws[0]);
  n.shape = std::move(out);
  return detail::emit(g, std::move(n));
}

template <typename Scalar>
Val<Scalar> linear(Val<Scalar> x, Val<Scalar> w, Val<Scalar> bias) {
  return linear(x, w, &bias);
}

template <typename Scalar>
Val<Scalar> gelu(Val<Scalar> x) {
  Node n;
  n.kind = OpKind::kGelu;
  n.inputs = {x.id};
  n.shape = x.shape();
  return detail::emit(*x.builder, std::move(n));
}

template <typename Scalar>
Val<Scalar> relu(Val<Scalar> x) {
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {x.id};
  n.shape = x.shape();
  return detail::emit(*x.builder, std::move(n));
}

/// Layer normalization over the last dim with learned affine.
template <typename Scalar>
Val<Scalar> layer_norm(Val<Scalar> x, Val<Scalar> scale, Val<Scalar> bias, double eps = 1e-5) {
  auto& g = detail::builder_of(x, scale);
  const Shape& xs = x.shape();
  detail::require(!xs.empty(), "layer_norm: input must have rank >= 1");
  const std::int64_t d = xs.back();
  detail::require(scale.shape() == Shape{d} && bias.shape() == Shape{d},
                  "layer_norm: affine params " + shape_str(scale.shape()) + "/" +
                      shape_str(bias.shape()) + " do not match feature dim of " + shape_str(xs));
  Node n;
  n.kind = OpKind::kLayerNorm;
  n.inputs = {x.id, scale.id, bias.id};
  n.shape = xs;
  n.fattr = eps;
  return detail::emit(g, std::move(n));
}

/// Row lookup: table [V, D], integer ids [...] -> [..., D].
template <typename Scalar>
Val<Scalar> embedding_lookup(Val<Scalar> table, Val<Scalar> ids) {
  auto& g = detail::builder_of(table, ids);
  detail::require(table.rank() == 2,
                  "embedding_lookup: table must be rank 2 [vocab,dim], got " +
                      shape_str(table.shape()));
  detail::require(ids.integer_valued(), "embedding_lookup: ids must be integer-valued");
  Node n;
  n.kind = OpKind::kEmbedLookup;
  n.inputs = {table.id, ids.id};
  Shape out = ids.shape();
  out.push_back(table.shape()[1]);
  n.shape = std::move(out);
  return detail::emit(g, std::move(n));
}

template <typename Scalar>
Val<Scalar> softmax(Val<Scalar> x) {
  detail::require(x.rank() >= 1, "softmax: input must have rank >= 1");
  Node n;
  n.kind = OpKind::kSoftmax;
  n.inputs = {x.id};
  n.shape = x.shape();
  return detail::emit(*x.builder, std::move(n));
}

/// Per-position cross entropy: logits [..., V], integer labels [...] -> [...].
template <typename Scalar>
Val<Scalar> softmax_cross_entropy(Val<Scalar> logits, Val<Scalar> labels) {
  auto& g = detail::builder_of(logits, labels);
  const Shape& ls = logits.shape();
  detail::require(!ls.empty(), "softmax_cross_entropy: logits must have rank >= 1");
  Shape expect(ls.begin(), ls.end() - 1);
  detail::require(labels.shape() == expect,
                  "softmax_cross_entropy: labels " + shape_str(labels.shape()) +
                      " do not match logits " + shape_str(ls));
  detail::require(labels.integer_valued(), "softmax_cross_entropy: labels must be integer-valued");
  Node n;
  n.kind = OpKind::kSoftmaxXent;
  n.inputs = {logits.id, labels.id};
  n.shape = std::move(expect);
  return detail::emit(g, std::move(n));
}

template <typename Scalar>
Val<Scalar> reshape(Val<Scalar> x, Shape target) {
  detail::require(shape_numel(target) == shape_numel(x.shape()),
                  "reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(target));
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {x.id};
  n.shape = std::move(target);
  n.integer_valued = x.integer_valued();
  return detail::emit(*x.builder, std::move(n));
}

template <typename Scalar>
Val<Scalar> transpose(Val<Scalar> x, std::vector<std::int64_t> perm) {
  const Shape& xs = x.shape();
  detail::require(perm.size() == xs.size(),
                  "transpose: perm size " + std::to_string(perm.size()) + " does not match rank of " +
                      shape_str(xs));
  std::vector<bool> seen(perm.size(), false);
  Shape out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    detail::require(perm[i] >= 0 && perm[i] < static_cast<std::int64_t>(perm.size()) &&
                        !seen[static_cast<std::size_t>(perm[i])],
                    "transpose: invalid permutation");
    seen[static_cast<std::size_t>(perm[i])] = true;
    out[i] = xs[static_cast<std::size_t>(perm[i])];
  }
  Node n;
  n.kind = OpKind::kTranspose;
  n.inputs = {x.id};
  n.shape = std::move(out);
  n.iattrs = std::move(perm);
  n.integer_valued = x.integer_valued();
  return detail::emit(*x.builder, std::move(n));
}

/// Swap the last two dims; rank must be >= 2.
template <typename Scalar>
Val<Scalar> transpose_last2(Val<Scalar> x) {
  detail::require(x.rank() >= 2, "transpose: input must have rank >= 2");
  std::vector<std::int64_t> perm(x.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<std::int64_t>(i);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(x, std::move(perm));
}

namespace detail {

template <typename Scalar>
Val<Scalar> reduce(OpKind kind, Val<Scalar> x, std::vector<std::int64_t> axes, bool keepdims) {
  const Shape& xs = x.shape();
  std::sort(axes.begin(), axes.end());
  require(std::unique(axes.begin(), axes.end()) == axes.end(), "reduce: duplicate axes");
  for (std::int64_t a : axes) {
    require(a >= 0 && a < static_cast<std::int64_t>(xs.size()),
            "reduce: axis " + std::to_string(a) + " out of range for " + shape_str(xs));
  }
  Node n;
  n.kind = kind;
  n.inputs = {x.id};
  n.shape = reduce_shape(xs, axes, keepdims);
  n.iattrs = std::move(axes);
  n.flag = keepdims;
  return emit(*x.builder, std::move(n));
}

}  // namespace detail

template <typename Scalar>
Val<Scalar> reduce_sum(Val<Scalar> x, std::vector<std::int64_t> axes, bool keepdims = false) {
  return detail::reduce(OpKind::kReduceSum, x, std::move(axes), keepdims);
}

template <typename Scalar>
Val<Scalar> reduce_mean(Val<Scalar> x, std::vector<std::int64_t> axes, bool keepdims = false) {
  return detail::reduce(OpKind::kReduceMean, x, std::move(axes), keepdims);
}

template <typename Scalar>
std::vector<std::int64_t> all_axes(Val<Scalar> x) {
  std::vector<std::int64_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<std::int64_t>(i);
  return axes;
}

/// Reduce to a rank-0 scalar.
template <typename Scalar>
Val<Scalar> reduce_sum_all(Val<Scalar> x) {
  return reduce_sum(x, all_axes(x));
}

template <typename Scalar>
Val<Scalar> reduce_mean_all(Val<Scalar> x) {
  return reduce_mean(x, all_axes(x));
}

template <typename Scalar>
Val<Scalar> broadcast_to(Val<Scalar> x, Shape target) {
  detail::require(detail::broadcastable_into(target, x.shape()),
                  "broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                      shape_str(target));
  Node n;
  n.kind = OpKind::kBroadcastTo;
  n.inputs = {x.id};
  n.shape = std::move(target);
  return detail::emit(*x.builder, std::move(n));
}

/// Identity in forward; treated as a constant by grad().
template <typename Scalar>
Val<Scalar> stop_gradient(Val<Scalar> x) {
  Node n;
  n.kind = OpKind::kStopGradient;
  n.inputs = {x.id};
  n.shape = x.shape();
  n.integer_valued = x.integer_valued();
  return detail::emit(*x.builder, std::move(n));
}

template <typename Scalar>
Val<Scalar> concat(Val<Scalar> a, Val<Scalar> b, std::int64_t axis) {
  auto& g = detail::builder_of(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require(as.size() == bs.size() && axis >= 0 && axis < static_cast<std::int64_t>(as.size()),
                  "concat: incompatible shapes " + shape_str(as) + " vs " + shape_str(bs));
  for (std::size_t i = 0; i < as.size(); ++i) {
    detail::require(static_cast<std::int64_t>(i) == axis || as[i] == bs[i],
                    "concat: incompatible shapes " + shape_str(as) + " vs " + shape_str(bs));
  }
  Node n;
  n.kind = OpKind::kConcat;
  n.inputs = {a.id, b.id};
  n.shape = as;
  n.shape[static_cast<std::size_t>(axis)] += bs[static_cast<std::size_t>(axis)];
  n.iattrs = {axis};
  n.integer_valued = a.integer_valued() && b.integer_valued();
  return detail::emit(g, std::move(n));
}

template <typename Scalar>
Val<Scalar> slice(Val<Scalar> x, std::int64_t axis, std::int64_t start, std::int64_t len) {
  const Shape& xs = x.shape();
  detail::require(axis >= 0 && axis < static_cast<std::int64_t>(xs.size()),
                  "slice: axis " + std::to_string(axis) + " out of range for " + shape_str(xs));
  detail::require(start >= 0 && len >= 1 && start + len <= xs[static_cast<std::size_t>(axis)],
                  "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") out of bounds for " + shape_str(xs));
  Node n;
  n.kind = OpKind::kSlice;
  n.inputs = {x.id};
  n.shape = xs;
  n.shape[static_cast<std::size_t>(axis)] = len;
  n.iattrs = {axis, start, len};
  n.integer_valued = x.integer_valued();
  return detail::emit(*x.builder, std::move(n));
}

/// Index of the max along the last dim; integer-valued output.
template <typename Scalar>
Val<Scalar> argmax(Val<Scalar> x) {
  detail::require(x.rank() >= 1, "argmax: input must have rank >= 1");
  Node n;
  n.kind = OpKind::kArgmax;
  n.inputs = {x.id};
  n.shape = Shape(x.shape().begin(), x.shape().end() - 1);
  n.integer_valued = true;
  return detail::emit(*x.builder, std::move(n));
}

// Convenience sugar.
template <typename Scalar>
Val<Scalar> operator+(Val<Scalar> a, Val<Scalar> b) {
  return add(a, b);
}
template <typename Scalar>
Val<Scalar> operator-(Val<Scalar> a, Val<Scalar> b) {
  return sub(a, b);
}
template <typename Scalar>
Val<Scalar> operator*(Val<Scalar> a, Val<Scalar> b) {
  return mul(a, b);
}

/// Scaled dot-product attention over per-head tensors, composed from the
/// primitive op set. q, k, v: [B, H, T, hd]. An optional additive mask
/// ([T, T], broadcast over batch and heads) is applied to the scores.
template <typename Scalar>
Val<Scalar> scaled_dot_product_attention(Val<Scalar> q, Val<Scalar> k, Val<Scalar> v,
                                         const Val<Scalar>* mask = nullptr) {
  detail::require(q.rank() == 4 && k.rank() == 4 && v.rank() == 4,
                  "scaled_dot_product_attention: q/k/v must be rank 4 [batch,heads,time,dim]");
  const std::int64_t head_dim = q.shape().back();
  Val<Scalar> scores = matmul(q, transpose_last2(k));
  scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(head_dim)));
  if (mask) scores = add(scores, *mask);
  Val<Scalar> probs = softmax(scores);
  return matmul(probs, v);
}

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kConst: return "const";
    case OpKind::kLinear: return "linear";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "multiply";
    case OpKind::kDiv: return "divide";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMulScalar: return "mul_scalar";
    case OpKind::kGelu: return "gelu";
    case OpKind::kRelu: return "relu";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kEmbedLookup: return "embedding_lookup";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSoftmaxXent: return "softmax_cross_entropy";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReduceSum: return "reduce_sum";
    case OpKind::kReduceMean: return "reduce_mean";
    case OpKind::kBroadcastTo: return "broadcast_to";
    case OpKind::kStopGradient: return "stop_gradient";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kArgmax: return "argmax";
    case OpKind::kGeluGrad: return "gelu_grad";
    case OpKind::kReluGrad: return "relu_grad";
    case OpKind::kLayerNormGradX: return "layer_norm_grad";
    case OpKind::kLayerNormXhat: return "layer_norm_xhat";
    case OpKind::kSoftmaxXentGrad: return "softmax_cross_entropy_grad";
    case OpKind::kEmbedLookupGrad: return "embedding_lookup_grad";
    case OpKind::kSliceGrad: return "slice_grad";
  }
  return "?";
}

}  // namespace shardweave
