#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "shardweave/graph.hpp"
#include "shardweave/kernels.hpp"
#include "shardweave/params.hpp"
#include "shardweave/tensor.hpp"

namespace shardweave {

struct EvalOptions {
  /// Checks every produced tensor for NaN/Inf and throws NonFiniteError on
  /// the first offender, naming the op that produced it.
  bool check_finite = true;
};

/// Computes one non-leaf node from its already computed operands. Both the
/// reference interpreter and the sharded executor funnel through this, so a
/// node has exactly one meaning.
template <typename Scalar>
Tensor<Scalar> apply_node(const Node& node, const std::vector<const Tensor<Scalar>*>& in) {
  switch (node.kind) {
    case OpKind::kLinear:
      return kernels::linear(*in[0], *in[1], in.size() == 3 ? in[2] : nullptr);
    case OpKind::kMatmul:
      return kernels::matmul(*in[0], *in[1]);
    case OpKind::kAdd:
      return kernels::add(*in[0], *in[1]);
    case OpKind::kMul:
      return kernels::mul(*in[0], *in[1]);
    case OpKind::kDiv:
      return kernels::div(*in[0], *in[1]);
    case OpKind::kAddScalar:
      return kernels::add_scalar(*in[0], node.fattr);
    case OpKind::kMulScalar:
      return kernels::mul_scalar(*in[0], node.fattr);
    case OpKind::kGelu:
      return kernels::gelu(*in[0]);
    case OpKind::kRelu:
      return kernels::relu(*in[0]);
    case OpKind::kLayerNorm:
      return kernels::layer_norm(*in[0], *in[1], *in[2], node.fattr);
    case OpKind::kEmbedLookup:
      return kernels::embedding_lookup(*in[0], *in[1]);
    case OpKind::kSoftmax:
      return kernels::softmax(*in[0]);
    case OpKind::kSoftmaxXent:
      return kernels::softmax_cross_entropy(*in[0], *in[1]);
    case OpKind::kReshape:
      return kernels::reshape(*in[0], node.shape);
    case OpKind::kTranspose:
      return kernels::transpose(*in[0], node.iattrs);
    case OpKind::kReduceSum:
      return kernels::reduce_sum(*in[0], node.iattrs, node.flag);
    case OpKind::kReduceMean:
      return kernels::reduce_mean(*in[0], node.iattrs, node.flag);
    case OpKind::kBroadcastTo:
      return kernels::broadcast_to(*in[0], node.shape);
    case OpKind::kStopGradient:
      return *in[0];
    case OpKind::kConcat:
      return kernels::concat(*in[0], *in[1], node.iattrs[0]);
    case OpKind::kSlice:
      return kernels::slice(*in[0], node.iattrs[0], node.iattrs[1], node.iattrs[2]);
    case OpKind::kArgmax:
      return kernels::argmax(*in[0]);
    case OpKind::kGeluGrad:
      return kernels::gelu_grad(*in[0], *in[1]);
    case OpKind::kReluGrad:
      return kernels::relu_grad(*in[0], *in[1]);
    case OpKind::kLayerNormGradX:
      return kernels::layer_norm_grad_x(*in[0], *in[1], *in[2], node.fattr);
    case OpKind::kLayerNormXhat:
      return kernels::layer_norm_xhat(*in[0], node.fattr);
    case OpKind::kSoftmaxXentGrad:
      return kernels::softmax_cross_entropy_grad(*in[0], *in[1], *in[2]);
    case OpKind::kEmbedLookupGrad:
      return kernels::embedding_lookup_grad(*in[0], *in[1], node.iattrs[0]);
    case OpKind::kSliceGrad:
      return kernels::slice_grad(*in[0], node.iattrs[0], node.iattrs[1], node.iattrs[2]);
    case OpKind::kInput:
    case OpKind::kParam:
    case OpKind::kConst:
      break;
  }
  throw ShapeError(std::string("apply_node: leaf op '") + op_name(node.kind) +
                   "' has no compute rule");
}

template <typename Scalar>
using InputMap = std::unordered_map<std::string, Tensor<Scalar>>;

/// Runs the graph on a single device and returns the values of `outputs`.
/// Every input and param leaf must be bound with its exact declared shape.
template <typename Scalar>
std::vector<Tensor<Scalar>> evaluate(const Graph<Scalar>& graph, const InputMap<Scalar>& inputs,
                                     const ParamTree<Scalar>& params,
                                     const std::vector<int>& outputs,
                                     const EvalOptions& opts = {}) {
  std::vector<Tensor<Scalar>> values;
  values.reserve(graph.nodes.size());
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const Node& node = graph.nodes[i];
    switch (node.kind) {
      case OpKind::kInput: {
        auto it = inputs.find(node.name);
        if (it == inputs.end()) {
          throw ShapeError("evaluate: input '" + node.name + "' not bound");
        }
        if (it->second.shape() != node.shape) {
          throw ShapeError("evaluate: input '" + node.name + "' bound with shape " +
                           shape_str(it->second.shape()) + ", declared " + shape_str(node.shape));
        }
        values.push_back(it->second);
        break;
      }
      case OpKind::kParam: {
        const Tensor<Scalar>& p = params.at(node.name);
        if (p.shape() != node.shape) {
          throw ShapeError("evaluate: param '" + node.name + "' has shape " +
                           shape_str(p.shape()) + ", declared " + shape_str(node.shape));
        }
        values.push_back(p);
        break;
      }
      case OpKind::kConst:
        values.push_back(graph.consts[static_cast<std::size_t>(node.const_index)]);
        break;
      default: {
        std::vector<const Tensor<Scalar>*> in;
        in.reserve(node.inputs.size());
        for (int id : node.inputs) in.push_back(&values[static_cast<std::size_t>(id)]);
        values.push_back(apply_node<Scalar>(node, in));
        break;
      }
    }
    if (opts.check_finite && !node.integer_valued && !values.back().all_finite()) {
      throw NonFiniteError(std::string("evaluate: non-finite value from op '") +
                           op_name(node.kind) + "' (node " + std::to_string(i) +
                           (node.name.empty() ? "" : ", '" + node.name + "'") + ")");
    }
  }
  std::vector<Tensor<Scalar>> result;
  result.reserve(outputs.size());
  for (int id : outputs) result.push_back(values.at(static_cast<std::size_t>(id)));
  return result;
}

template <typename Scalar>
Tensor<Scalar> evaluate_one(const Graph<Scalar>& graph, const InputMap<Scalar>& inputs,
                            const ParamTree<Scalar>& params, int output,
                            const EvalOptions& opts = {}) {
  return evaluate(graph, inputs, params, std::vector<int>{output}, opts)[0];
}

}  // namespace shardweave
