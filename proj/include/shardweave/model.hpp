#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "shardweave/errors.hpp"
#include "shardweave/graph.hpp"
#include "shardweave/model_spec.hpp"
#include "shardweave/params.hpp"
#include "shardweave/rng.hpp"

namespace shardweave {

/// Parameter names and shapes for a pre-norm decoder-only transformer, in
/// tree order. Kernels are [out_features, in_features].
inline ShapeMap transformer_param_shapes(const ModelSpec& spec) {
  ShapeMap shapes;
  const std::int64_t d = spec.d_model;
  shapes.emplace_back("embed/tok/kernel", Shape{spec.vocab_size, d});
  shapes.emplace_back("embed/pos/kernel", Shape{spec.max_seq_len, d});
  for (int layer = 0; layer < spec.n_layers; ++layer) {
    const std::string block = "block_" + std::to_string(layer);
    shapes.emplace_back(block + "/ln1/scale", Shape{d});
    shapes.emplace_back(block + "/ln1/bias", Shape{d});
    for (const char* proj : {"q", "k", "v", "o"}) {
      shapes.emplace_back(block + "/attn/" + proj + "/kernel", Shape{d, d});
      shapes.emplace_back(block + "/attn/" + proj + "/bias", Shape{d});
    }
    shapes.emplace_back(block + "/ln2/scale", Shape{d});
    shapes.emplace_back(block + "/ln2/bias", Shape{d});
    shapes.emplace_back(block + "/mlp/fc1/kernel", Shape{spec.d_ff, d});
    shapes.emplace_back(block + "/mlp/fc1/bias", Shape{spec.d_ff});
    shapes.emplace_back(block + "/mlp/fc2/kernel", Shape{d, spec.d_ff});
    shapes.emplace_back(block + "/mlp/fc2/bias", Shape{d});
  }
  shapes.emplace_back("final_ln/scale", Shape{d});
  shapes.emplace_back("final_ln/bias", Shape{d});
  if (!spec.tie_embeddings) {
    shapes.emplace_back("lm_head/kernel", Shape{spec.vocab_size, d});
  }
  return shapes;
}

/// Parameter tree for the transformer. Kernels are drawn N(0, 1/fan_in),
/// embedding tables N(0, 0.02^2); biases start at zero and layer-norm scales
/// at one. All draws come from `rng` in tree order, so the same stream
/// reproduces the same model.
template <typename Scalar>
ParamTree<Scalar> init_transformer_params(const ModelSpec& spec, RngStream rng) {
  ParamTree<Scalar> tree;
  for (const auto& [name, shape] : transformer_param_shapes(spec)) {
    const std::string leaf = name.substr(name.rfind('/') + 1);
    if (leaf == "bias") {
      tree.add(name, Tensor<Scalar>::zeros(shape));
    } else if (leaf == "scale") {
      tree.add(name, Tensor<Scalar>::full(shape, Scalar(1)));
    } else {
      const double scale = name.rfind("embed/", 0) == 0
                               ? 0.02
                               : 1.0 / std::sqrt(static_cast<double>(shape[1]));
      Tensor<Scalar> t = Tensor<Scalar>::zeros(shape);
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<Scalar>(rng.next_normal() * scale);
      }
      tree.add(name, std::move(t));
    }
  }
  return tree;
}

/// Traces the forward pass over an integer input "tokens" [batch, seq_len]
/// and returns next-token logits [batch, seq_len, vocab]. Attention is
/// causal (additive mask); positions are baked in as a constant, so seq_len
/// must not exceed max_seq_len.
template <typename Scalar>
Val<Scalar> transformer_logits(GraphBuilder<Scalar>& b, const ModelSpec& spec,
                               std::int64_t batch, std::int64_t seq_len) {
  if (batch < 1 || seq_len < 1) {
    throw ConfigError("transformer_logits: batch and seq_len must be positive");
  }
  if (seq_len > spec.max_seq_len) {
    throw ConfigError("transformer_logits: seq_len " + std::to_string(seq_len) +
                      " exceeds max_seq_len " + std::to_string(spec.max_seq_len));
  }
  const std::int64_t d = spec.d_model;
  const std::int64_t heads = spec.n_heads;
  const std::int64_t head_dim = d / heads;

  Val<Scalar> tokens = b.input("tokens", {batch, seq_len}, true);
  Val<Scalar> tok_table = b.param("embed/tok/kernel", {spec.vocab_size, d});
  Val<Scalar> pos_table = b.param("embed/pos/kernel", {spec.max_seq_len, d});

  Tensor<Scalar> iota = Tensor<Scalar>::zeros({seq_len});
  for (std::int64_t t = 0; t < seq_len; ++t) iota[t] = static_cast<Scalar>(t);
  Val<Scalar> positions = b.constant(std::move(iota), true);
  Val<Scalar> h =
      add(embedding_lookup(tok_table, tokens), embedding_lookup(pos_table, positions));

  Tensor<Scalar> causal = Tensor<Scalar>::zeros({seq_len, seq_len});
  for (std::int64_t i = 0; i < seq_len; ++i) {
    for (std::int64_t j = i + 1; j < seq_len; ++j) {
      causal[i * seq_len + j] = Scalar(-1e9);
    }
  }
  Val<Scalar> mask = b.constant(std::move(causal));

  for (int layer = 0; layer < spec.n_layers; ++layer) {
    const std::string block = "block_" + std::to_string(layer);
    Val<Scalar> pre = layer_norm(h, b.param(block + "/ln1/scale", {d}),
                                 b.param(block + "/ln1/bias", {d}));
    auto project = [&](const char* name) {
      Val<Scalar> w = b.param(block + "/attn/" + name + "/kernel", {d, d});
      Val<Scalar> bias = b.param(block + "/attn/" + name + "/bias", {d});
      Val<Scalar> y = linear(pre, w, bias);
      return transpose(reshape(y, {batch, seq_len, heads, head_dim}), {0, 2, 1, 3});
    };
    Val<Scalar> att =
        scaled_dot_product_attention(project("q"), project("k"), project("v"), &mask);
    Val<Scalar> merged = reshape(transpose(att, {0, 2, 1, 3}), {batch, seq_len, d});
    Val<Scalar> out = linear(merged, b.param(block + "/attn/o/kernel", {d, d}),
                             b.param(block + "/attn/o/bias", {d}));
    h = add(h, out);

    Val<Scalar> mid = layer_norm(h, b.param(block + "/ln2/scale", {d}),
                                 b.param(block + "/ln2/bias", {d}));
    Val<Scalar> up = linear(mid, b.param(block + "/mlp/fc1/kernel", {spec.d_ff, d}),
                            b.param(block + "/mlp/fc1/bias", {spec.d_ff}));
    Val<Scalar> down = linear(gelu(up), b.param(block + "/mlp/fc2/kernel", {d, spec.d_ff}),
                              b.param(block + "/mlp/fc2/bias", {d}));
    h = add(h, down);
  }

  Val<Scalar> final_h = layer_norm(h, b.param("final_ln/scale", {d}),
                                   b.param("final_ln/bias", {d}));
  Val<Scalar> head = spec.tie_embeddings ? tok_table
                                         : b.param("lm_head/kernel", {spec.vocab_size, d});
  return linear(final_h, head);
}

/// Traces the training loss: weighted mean cross entropy over the integer
/// inputs "targets" [batch, seq_len] with float "weights" [batch, seq_len]
/// (1 for real tokens, 0 for padding).
template <typename Scalar>
Val<Scalar> transformer_loss(GraphBuilder<Scalar>& b, const ModelSpec& spec, std::int64_t batch,
                             std::int64_t seq_len) {
  Val<Scalar> logits = transformer_logits(b, spec, batch, seq_len);
  Val<Scalar> targets = b.input("targets", {batch, seq_len}, true);
  Val<Scalar> weights = b.input("weights", {batch, seq_len});
  Val<Scalar> ce = softmax_cross_entropy(logits, targets);
  return div(reduce_sum_all(mul(ce, weights)), reduce_sum_all(weights));
}

}  // namespace shardweave
