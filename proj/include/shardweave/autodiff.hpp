#pragma once

#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "shardweave/graph.hpp"
#include "shardweave/params.hpp"
#include "shardweave/tensor.hpp"

namespace shardweave {

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// Adjoint of a broadcast: reduces dy back down to `target`, summing over the
/// broadcast dims.
template <typename Scalar>
Val<Scalar> reduce_to(Val<Scalar> dy, const Shape& target) {
  if (dy.shape() == target) return dy;
  std::vector<std::int64_t> axes;
  const std::size_t offset = dy.rank() - target.size();
  for (std::size_t d = 0; d < dy.rank(); ++d) {
    if (d < offset || target[d - offset] == 1) axes.push_back(static_cast<std::int64_t>(d));
  }
  return reshape(reduce_sum(dy, std::move(axes)), target);
}

inline std::vector<std::int64_t> inverse_perm(const std::vector<std::int64_t>& perm) {
  std::vector<std::int64_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    inv[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
  }
  return inv;
}

}  // namespace detail

/// Extends the graph with reverse-mode gradient nodes of a scalar `loss` with
/// respect to the named params, and returns (name, node id) pairs aligned
/// with `wrt`. Params the loss does not depend on get constant-zero
/// gradients, so callers always receive a full set.
///
/// The returned graph region is made of ordinary ops plus a few backward-only
/// primitives; differentiating through those is not supported, so gradients
/// are first order. stop_gradient cuts the flow and is the intended escape
/// hatch for algorithms that nest one gradient inside another.
template <typename Scalar>
std::vector<std::pair<std::string, int>> grad(GraphBuilder<Scalar>& b, Val<Scalar> loss,
                                              const ShapeMap& wrt) {
  const Node& loss_node = b.node(loss.id);
  if (!loss_node.shape.empty()) {
    throw AutodiffError("grad: loss must be a scalar, got shape " + shape_str(loss_node.shape));
  }
  if (loss_node.integer_valued) {
    throw AutodiffError("grad: loss is integer-valued and not differentiable");
  }
  std::unordered_set<std::string> wrt_names;
  for (const auto& [name, shape] : wrt) {
    if (!wrt_names.insert(name).second) {
      throw AutodiffError("grad: duplicate param '" + name + "'");
    }
    const int id = b.lookup(name);
    if (id >= 0 && b.node(id).shape != shape) {
      throw AutodiffError("grad: param '" + name + "' declared with shape " +
                          shape_str(b.node(id).shape) + ", expected " + shape_str(shape));
    }
  }

  const int n = loss.id + 1;
  std::vector<bool> needs(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n; ++i) {
    const Node& node = b.node(i);
    if (node.integer_valued || node.kind == OpKind::kStopGradient) continue;
    if (node.kind == OpKind::kParam) {
      needs[static_cast<std::size_t>(i)] = wrt_names.count(node.name) > 0;
      continue;
    }
    for (int in : node.inputs) {
      if (needs[static_cast<std::size_t>(in)]) {
        needs[static_cast<std::size_t>(i)] = true;
        break;
      }
    }
  }

  auto val = [&b](int id) { return Val<Scalar>{&b, id}; };

  // Adjoint contributions per node; summed when the node is processed.
  std::vector<std::vector<int>> contribs(static_cast<std::size_t>(n));
  if (needs[static_cast<std::size_t>(loss.id)]) {
    contribs[static_cast<std::size_t>(loss.id)].push_back(
        b.constant(Tensor<Scalar>::scalar(Scalar(1))).id);
  }

  for (int i = n - 1; i >= 0; --i) {
    auto& parts = contribs[static_cast<std::size_t>(i)];
    if (parts.empty() || !needs[static_cast<std::size_t>(i)]) continue;
    Val<Scalar> dy = val(parts[0]);
    for (std::size_t p = 1; p < parts.size(); ++p) dy = add(dy, val(parts[p]));

    const Node node = b.node(i);  // copy: emitting ops below may reallocate
    // VJP emissions are gated on the input needing a gradient, so dead
    // backward nodes never enter the graph.
    auto wants = [&](std::size_t k) {
      return needs[static_cast<std::size_t>(node.inputs[k])];
    };
    auto flow = [&](int input, Val<Scalar> contribution) {
      contribs[static_cast<std::size_t>(input)].push_back(contribution.id);
    };
    const auto in = [&](std::size_t k) { return val(node.inputs[k]); };

    switch (node.kind) {
      case OpKind::kParam:
      case OpKind::kInput:
      case OpKind::kConst:
        break;
      case OpKind::kLinear: {
        Val<Scalar> x = in(0);
        Val<Scalar> w = in(1);
        const std::int64_t features_in = w.shape()[1];
        const std::int64_t features_out = w.shape()[0];
        const std::int64_t rows = shape_numel(x.shape()) / features_in;
        Val<Scalar> dyf = reshape(dy, {rows, features_out});
        if (wants(0)) flow(node.inputs[0], reshape(matmul(dyf, w), x.shape()));
        if (wants(1)) {
          flow(node.inputs[1], matmul(transpose_last2(dyf), reshape(x, {rows, features_in})));
        }
        if (node.inputs.size() == 3 && wants(2)) {
          flow(node.inputs[2], reduce_sum(dyf, {0}));
        }
        break;
      }
      case OpKind::kMatmul: {
        if (wants(0)) flow(node.inputs[0], matmul(dy, transpose_last2(in(1))));
        if (wants(1)) flow(node.inputs[1], matmul(transpose_last2(in(0)), dy));
        break;
      }
      case OpKind::kAdd:
        if (wants(0)) flow(node.inputs[0], dy);
        if (wants(1)) flow(node.inputs[1], detail::reduce_to(dy, in(1).shape()));
        break;
      case OpKind::kMul:
        if (wants(0)) flow(node.inputs[0], mul(dy, in(1)));
        if (wants(1)) flow(node.inputs[1], detail::reduce_to(mul(dy, in(0)), in(1).shape()));
        break;
      case OpKind::kDiv: {
        Val<Scalar> quotient = val(i);
        if (wants(0)) flow(node.inputs[0], div(dy, in(1)));
        if (wants(1)) {
          flow(node.inputs[1],
               detail::reduce_to(mul_scalar(mul(div(dy, in(1)), quotient), -1.0), in(1).shape()));
        }
        break;
      }
      case OpKind::kAddScalar:
        if (wants(0)) flow(node.inputs[0], dy);
        break;
      case OpKind::kMulScalar:
        if (wants(0)) flow(node.inputs[0], mul_scalar(dy, node.fattr));
        break;
      case OpKind::kGelu: {
        if (!wants(0)) break;
        Node g;
        g.kind = OpKind::kGeluGrad;
        g.inputs = {node.inputs[0], dy.id};
        g.shape = in(0).shape();
        flow(node.inputs[0], b.push(std::move(g)));
        break;
      }
      case OpKind::kRelu: {
        if (!wants(0)) break;
        Node g;
        g.kind = OpKind::kReluGrad;
        g.inputs = {node.inputs[0], dy.id};
        g.shape = in(0).shape();
        flow(node.inputs[0], b.push(std::move(g)));
        break;
      }
      case OpKind::kLayerNorm: {
        Val<Scalar> x = in(0);
        std::vector<std::int64_t> batch_axes;
        for (std::size_t d = 0; d + 1 < x.rank(); ++d) {
          batch_axes.push_back(static_cast<std::int64_t>(d));
        }
        if (wants(0)) {
          Node g;
          g.kind = OpKind::kLayerNormGradX;
          g.inputs = {node.inputs[0], node.inputs[1], dy.id};
          g.shape = x.shape();
          g.fattr = node.fattr;
          flow(node.inputs[0], b.push(std::move(g)));
        }
        if (wants(1)) {
          Node h;
          h.kind = OpKind::kLayerNormXhat;
          h.inputs = {node.inputs[0]};
          h.shape = x.shape();
          h.fattr = node.fattr;
          Val<Scalar> xhat = b.push(std::move(h));
          flow(node.inputs[1], reduce_sum(mul(dy, xhat), batch_axes));
        }
        if (wants(2)) flow(node.inputs[2], reduce_sum(dy, batch_axes));
        break;
      }
      case OpKind::kEmbedLookup: {
        if (!wants(0)) break;
        Node g;
        g.kind = OpKind::kEmbedLookupGrad;
        g.inputs = {node.inputs[1], dy.id};
        g.shape = in(0).shape();
        g.iattrs = {in(0).shape()[0]};
        flow(node.inputs[0], b.push(std::move(g)));
        break;
      }
      case OpKind::kSoftmax: {
        if (!wants(0)) break;
        Val<Scalar> y = val(i);
        const std::int64_t last = static_cast<std::int64_t>(y.rank()) - 1;
        Val<Scalar> inner = reduce_sum(mul(dy, y), {last}, /*keepdims=*/true);
        flow(node.inputs[0], mul(y, sub(dy, inner)));
        break;
      }
      case OpKind::kSoftmaxXent: {
        if (!wants(0)) break;
        Node g;
        g.kind = OpKind::kSoftmaxXentGrad;
        g.inputs = {node.inputs[0], node.inputs[1], dy.id};
        g.shape = in(0).shape();
        flow(node.inputs[0], b.push(std::move(g)));
        break;
      }
      case OpKind::kReshape:
        if (wants(0)) flow(node.inputs[0], reshape(dy, in(0).shape()));
        break;
      case OpKind::kTranspose:
        if (wants(0)) flow(node.inputs[0], transpose(dy, detail::inverse_perm(node.iattrs)));
        break;
      case OpKind::kReduceSum:
      case OpKind::kReduceMean: {
        if (!wants(0)) break;
        const Shape& xs = in(0).shape();
        Val<Scalar> expanded = dy;
        if (!node.flag) {
          Shape kept = xs;
          for (std::int64_t a : node.iattrs) kept[static_cast<std::size_t>(a)] = 1;
          expanded = reshape(dy, kept);
        }
        expanded = broadcast_to(expanded, xs);
        if (node.kind == OpKind::kReduceMean) {
          std::int64_t count = 1;
          for (std::int64_t a : node.iattrs) count *= xs[static_cast<std::size_t>(a)];
          expanded = mul_scalar(expanded, 1.0 / static_cast<double>(count));
        }
        flow(node.inputs[0], expanded);
        break;
      }
      case OpKind::kBroadcastTo:
        if (wants(0)) flow(node.inputs[0], detail::reduce_to(dy, in(0).shape()));
        break;
      case OpKind::kConcat: {
        const std::int64_t axis = node.iattrs[0];
        const std::int64_t split = in(0).shape()[static_cast<std::size_t>(axis)];
        const std::int64_t rest = in(1).shape()[static_cast<std::size_t>(axis)];
        if (wants(0)) flow(node.inputs[0], slice(dy, axis, 0, split));
        if (wants(1)) flow(node.inputs[1], slice(dy, axis, split, rest));
        break;
      }
      case OpKind::kSlice: {
        if (!wants(0)) break;
        Node g;
        g.kind = OpKind::kSliceGrad;
        g.inputs = {dy.id};
        g.shape = in(0).shape();
        g.iattrs = {node.iattrs[0], node.iattrs[1],
                    in(0).shape()[static_cast<std::size_t>(node.iattrs[0])]};
        flow(node.inputs[0], b.push(std::move(g)));
        break;
      }
      case OpKind::kStopGradient:
      case OpKind::kArgmax:
        // Unreachable: both are excluded from the need set.
        break;
      case OpKind::kGeluGrad:
      case OpKind::kReluGrad:
      case OpKind::kLayerNormGradX:
      case OpKind::kLayerNormXhat:
      case OpKind::kSoftmaxXentGrad:
      case OpKind::kEmbedLookupGrad:
      case OpKind::kSliceGrad:
        throw AutodiffError(std::string("grad: cannot differentiate through '") +
                            op_name(node.kind) +
                            "'; only first-order gradients are supported "
                            "(wrap inner gradients in stop_gradient)");
    }
  }

  std::vector<std::pair<std::string, int>> result;
  result.reserve(wrt.size());
  for (const auto& [name, shape] : wrt) {
    const int id = b.lookup(name);
    int grad_id = -1;
    if (id >= 0 && id < n && !contribs[static_cast<std::size_t>(id)].empty()) {
      const auto& parts = contribs[static_cast<std::size_t>(id)];
      Val<Scalar> total = val(parts[0]);
      for (std::size_t p = 1; p < parts.size(); ++p) total = add(total, val(parts[p]));
      grad_id = total.id;
    } else {
      grad_id = b.constant(Tensor<Scalar>::zeros(shape)).id;
    }
    result.emplace_back(name, grad_id);
  }
  return result;
}

}  // namespace shardweave
