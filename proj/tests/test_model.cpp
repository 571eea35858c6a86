#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "shardweave/autodiff.hpp"
#include "shardweave/eval.hpp"
#include "shardweave/graph.hpp"
#include "shardweave/model.hpp"
#include "shardweave/model_spec.hpp"
#include "shardweave/plan.hpp"
#include "shardweave/rng.hpp"
#include "shardweave/spmd.hpp"
#include "shardweave/train_state.hpp"

using namespace shardweave;

namespace {

ModelSpec tiny_spec() {
  ModelSpec spec;
  spec.vocab_size = 11;
  spec.n_layers = 2;
  spec.d_model = 8;
  spec.n_heads = 2;
  spec.d_ff = 16;
  spec.max_seq_len = 6;
  return spec;
}

Tensor<double> token_batch(RngStream& rng, std::int64_t batch, std::int64_t seq,
                           std::int64_t vocab) {
  Tensor<double> t = Tensor<double>::zeros({batch, seq});
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<double>(rng.next_u64() % static_cast<std::uint64_t>(vocab));
  }
  return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

/// Loss graph plus everything needed to evaluate or shard it.
struct LossTrace {
  GraphBuilder<double> builder;
  int loss_id = -1;
  std::vector<std::pair<std::string, int>> grad_nodes;
  InputMap<double> inputs;
};

LossTrace trace_loss(const ModelSpec& spec, const ParamTree<double>& params, std::int64_t batch,
                     std::int64_t seq, std::uint64_t seed) {
  LossTrace t;
  auto loss = transformer_loss(t.builder, spec, batch, seq);
  t.loss_id = loss.id;
  t.grad_nodes = grad(t.builder, loss, shapes_of(params));

  RngStream rng(seed, "tokens");
  t.inputs.emplace("tokens", token_batch(rng, batch, seq, spec.vocab_size));
  t.inputs.emplace("targets", token_batch(rng, batch, seq, spec.vocab_size));
  t.inputs.emplace("weights", Tensor<double>::full({batch, seq}, 1.0));
  return t;
}

}  // namespace

TEST_CASE("model spec parser reads keys, comments, and role overrides") {
  const std::string text =
      "# char language model\n"
      "vocab_size = 50\n"
      "n_layers = 4    # depth\n"
      "d_model = 64\n"
      "\n"
      "n_heads = 8\n"
      "d_ff = 256\n"
      "max_seq_len = 32\n"
      "tie_embeddings = yes\n"
      "role lm_head/kernel = fully_connected\n";
  const ModelSpec spec = parse_model_spec(text);
  CHECK(spec.vocab_size == 50);
  CHECK(spec.n_layers == 4);
  CHECK(spec.d_model == 64);
  CHECK(spec.n_heads == 8);
  CHECK(spec.d_ff == 256);
  CHECK(spec.max_seq_len == 32);
  CHECK(spec.tie_embeddings);
  REQUIRE(spec.overrides.size() == 1);
  CHECK(spec.overrides[0].pattern == "lm_head/kernel");
  CHECK(spec.overrides[0].role == ParamRole::kFullyConnected);
}

TEST_CASE("model spec parser rejects malformed input") {
  const std::string base =
      "vocab_size = 50\nn_layers = 2\nd_model = 16\nn_heads = 4\nd_ff = 32\nmax_seq_len = 8\n";

  SUBCASE("missing equals sign") {
    CHECK_THROWS_WITH_AS(parse_model_spec(base + "d_model 32\n"),
                         doctest::Contains("line 7"), ConfigError);
  }
  SUBCASE("unknown key") {
    CHECK_THROWS_WITH_AS(parse_model_spec(base + "dropout = 0.1\n"),
                         doctest::Contains("unknown key 'dropout'"), ConfigError);
  }
  SUBCASE("duplicate key") {
    CHECK_THROWS_WITH_AS(parse_model_spec(base + "d_model = 16\n"),
                         doctest::Contains("duplicate key 'd_model'"), ConfigError);
  }
  SUBCASE("non-integer value") {
    CHECK_THROWS_WITH_AS(parse_model_spec("vocab_size = banana\n"),
                         doctest::Contains("needs an integer"), ConfigError);
  }
  SUBCASE("bad boolean") {
    CHECK_THROWS_WITH_AS(parse_model_spec(base + "tie_embeddings = maybe\n"),
                         doctest::Contains("true or false"), ConfigError);
  }
  SUBCASE("missing required key") {
    CHECK_THROWS_WITH_AS(parse_model_spec("vocab_size = 50\n"),
                         doctest::Contains("missing required key"), ConfigError);
  }
  SUBCASE("non-positive dimension") {
    CHECK_THROWS_WITH_AS(
        parse_model_spec("vocab_size = 50\nn_layers = 0\nd_model = 16\nn_heads = 4\n"
                         "d_ff = 32\nmax_seq_len = 8\n"),
        doctest::Contains("positive"), ConfigError);
  }
  SUBCASE("head count does not divide d_model") {
    CHECK_THROWS_WITH_AS(
        parse_model_spec("vocab_size = 50\nn_layers = 2\nd_model = 16\nn_heads = 3\n"
                         "d_ff = 32\nmax_seq_len = 8\n"),
        doctest::Contains("divisible"), ConfigError);
  }
  SUBCASE("bad role name") {
    CHECK_THROWS_WITH_AS(parse_model_spec(base + "role x/y = sideways\n"),
                         doctest::Contains("unknown role"), ConfigError);
  }
}

TEST_CASE("model spec files round-trip through disk") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "shardweave_model_spec";
  fs::create_directories(dir);
  const fs::path file = dir / "tiny.model";
  {
    std::ofstream out(file);
    out << "vocab_size = 11\nn_layers = 2\nd_model = 8\nn_heads = 2\nd_ff = 16\n"
        << "max_seq_len = 6\n";
  }
  const ModelSpec spec = read_model_spec(file.string());
  CHECK(spec.vocab_size == 11);
  CHECK(spec.d_ff == 16);
  CHECK_FALSE(spec.tie_embeddings);
  fs::remove_all(dir);

  CHECK_THROWS_WITH_AS(read_model_spec((dir / "absent.model").string()),
                       doctest::Contains("cannot open"), ConfigError);
}

TEST_CASE("transformer parameter tree has the expected shapes and order") {
  const ModelSpec spec = tiny_spec();
  const ParamTree<double> tree = init_transformer_params<double>(spec, RngStream(3, "init"));

  const std::vector<std::pair<std::string, Shape>> want = {
      {"embed/tok/kernel", {11, 8}},
      {"embed/pos/kernel", {6, 8}},
      {"block_0/ln1/scale", {8}},
      {"block_0/ln1/bias", {8}},
      {"block_0/attn/q/kernel", {8, 8}},
      {"block_0/attn/q/bias", {8}},
      {"block_0/attn/k/kernel", {8, 8}},
      {"block_0/attn/k/bias", {8}},
      {"block_0/attn/v/kernel", {8, 8}},
      {"block_0/attn/v/bias", {8}},
      {"block_0/attn/o/kernel", {8, 8}},
      {"block_0/attn/o/bias", {8}},
      {"block_0/ln2/scale", {8}},
      {"block_0/ln2/bias", {8}},
      {"block_0/mlp/fc1/kernel", {16, 8}},
      {"block_0/mlp/fc1/bias", {16}},
      {"block_0/mlp/fc2/kernel", {8, 16}},
      {"block_0/mlp/fc2/bias", {8}},
      {"block_1/ln1/scale", {8}},
      {"block_1/ln1/bias", {8}},
      {"block_1/attn/q/kernel", {8, 8}},
      {"block_1/attn/q/bias", {8}},
      {"block_1/attn/k/kernel", {8, 8}},
      {"block_1/attn/k/bias", {8}},
      {"block_1/attn/v/kernel", {8, 8}},
      {"block_1/attn/v/bias", {8}},
      {"block_1/attn/o/kernel", {8, 8}},
      {"block_1/attn/o/bias", {8}},
      {"block_1/ln2/scale", {8}},
      {"block_1/ln2/bias", {8}},
      {"block_1/mlp/fc1/kernel", {16, 8}},
      {"block_1/mlp/fc1/bias", {16}},
      {"block_1/mlp/fc2/kernel", {8, 16}},
      {"block_1/mlp/fc2/bias", {8}},
      {"final_ln/scale", {8}},
      {"final_ln/bias", {8}},
      {"lm_head/kernel", {11, 8}},
  };
  REQUIRE(tree.size() == want.size());
  std::size_t i = 0;
  for (const auto& [name, value] : tree.entries()) {
    CAPTURE(i);
    CHECK(name == want[i].first);
    CHECK(value.shape() == want[i].second);
    ++i;
  }

  for (std::int64_t j = 0; j < 8; ++j) {
    CHECK(tree.at("block_0/ln1/scale")[j] == 1.0);
    CHECK(tree.at("block_0/attn/q/bias")[j] == 0.0);
    CHECK(tree.at("final_ln/bias")[j] == 0.0);
  }

  const ParamTree<double> again = init_transformer_params<double>(spec, RngStream(3, "init"));
  for (const auto& [name, value] : tree.entries()) {
    CAPTURE(name);
    CHECK(value.bit_equal(again.at(name)));
  }

  ModelSpec tied = spec;
  tied.tie_embeddings = true;
  const ParamTree<double> tied_tree = init_transformer_params<double>(tied, RngStream(3, "init"));
  CHECK(tied_tree.size() == tree.size() - 1);
  CHECK_FALSE(tied_tree.contains("lm_head/kernel"));
}

TEST_CASE("sharding plan splits transformer kernels by the alternating rules") {
  const ModelSpec spec = tiny_spec();
  const ParamTree<double> tree = init_transformer_params<double>(spec, RngStream(3, "init"));
  const ShardingPlan plan = derive_plan(tree, 2, spec.overrides);

  for (const char* block : {"block_0", "block_1"}) {
    const std::string prefix = block;
    CHECK(plan.at(prefix + "/attn/q/kernel") == Partition::split(0));
    CHECK(plan.at(prefix + "/attn/k/kernel") == Partition::split(0));
    CHECK(plan.at(prefix + "/attn/v/kernel") == Partition::split(0));
    CHECK(plan.at(prefix + "/attn/o/kernel") == Partition::split(1));
    CHECK(plan.at(prefix + "/mlp/fc1/kernel") == Partition::split(0));
    CHECK(plan.at(prefix + "/mlp/fc2/kernel") == Partition::split(1));
    CHECK(plan.at(prefix + "/attn/q/bias") == Partition::replicated());
    CHECK(plan.at(prefix + "/ln1/scale") == Partition::replicated());
  }
  CHECK(plan.at("embed/tok/kernel") == Partition::replicated());
  CHECK(plan.at("embed/pos/kernel") == Partition::replicated());
  CHECK(plan.at("lm_head/kernel") == Partition::replicated());
  CHECK(plan.at("final_ln/scale") == Partition::replicated());
}

TEST_CASE("transformer loss matches between single device and model parallel") {
  const ModelSpec spec = tiny_spec();
  const ParamTree<double> params = init_transformer_params<double>(spec, RngStream(3, "init"));
  LossTrace t = trace_loss(spec, params, 2, 5, 11);

  const double want_loss = evaluate_one(t.builder.graph(), t.inputs, params, t.loss_id).item();
  CHECK(std::isfinite(want_loss));
  CHECK(std::abs(want_loss - std::log(11.0)) < 0.5);

  ParamTree<double> want_grads;
  for (const auto& [name, id] : t.grad_nodes) {
    want_grads.add(name, evaluate_one(t.builder.graph(), t.inputs, params, id));
  }

  for (int mp : {2, 4}) {
    CAPTURE(mp);
    DeviceMesh mesh = build_mesh(1, mp, 1);
    ShardingPlan plan = derive_plan(params, mp, spec.overrides);
    TrainState<double> state = shard_params(params, plan, mesh);
    SpmdParamMap<double> views = replica_param_views(state, mesh, 0);

    CommReport report;
    auto result = spmd_forward_backward(t.builder.graph(), t.loss_id, t.grad_nodes, t.inputs,
                                        views, mesh, mesh.mp_group(0), &report);
    CHECK(std::abs(result.loss - want_loss) < 1e-10);
    for (const auto& [name, g] : result.grads) {
      CAPTURE(name);
      CHECK(g.partition == plan.at(name));
      CHECK(max_abs_diff(gather(g), want_grads.at(name)) < 1e-10);
    }
    CHECK(report.stat(CollectiveKind::kAllReduce).count > 0);
  }
}

TEST_CASE("causal masking keeps earlier positions independent of later tokens") {
  const ModelSpec spec = tiny_spec();
  const ParamTree<double> params = init_transformer_params<double>(spec, RngStream(5, "init"));
  const std::int64_t batch = 2;
  const std::int64_t seq = 5;

  GraphBuilder<double> b;
  auto logits = transformer_logits(b, spec, batch, seq);

  RngStream rng(9, "tokens");
  InputMap<double> inputs;
  inputs.emplace("tokens", token_batch(rng, batch, seq, spec.vocab_size));
  const Tensor<double> before = evaluate_one(b.graph(), inputs, params, logits.id);

  Tensor<double> bumped = inputs.at("tokens");
  for (std::int64_t row = 0; row < batch; ++row) {
    double& last = bumped[row * seq + (seq - 1)];
    last = last == 0.0 ? 1.0 : 0.0;
  }
  inputs.at("tokens") = bumped;
  const Tensor<double> after = evaluate_one(b.graph(), inputs, params, logits.id);

  REQUIRE(before.shape() == Shape{batch, seq, spec.vocab_size});
  double leaked = 0.0;
  double moved = 0.0;
  for (std::int64_t row = 0; row < batch; ++row) {
    for (std::int64_t pos = 0; pos < seq; ++pos) {
      for (std::int64_t v = 0; v < spec.vocab_size; ++v) {
        const std::int64_t idx = (row * seq + pos) * spec.vocab_size + v;
        const double diff = std::abs(before[idx] - after[idx]);
        if (pos + 1 < seq) {
          leaked = std::max(leaked, diff);
        } else {
          moved = std::max(moved, diff);
        }
      }
    }
  }
  CHECK(leaked < 1e-12);
  CHECK(moved > 1e-6);
}

TEST_CASE("tied embeddings reuse the token table for the output projection") {
  ModelSpec spec = tiny_spec();
  spec.tie_embeddings = true;
  const ParamTree<double> params = init_transformer_params<double>(spec, RngStream(3, "init"));
  LossTrace t = trace_loss(spec, params, 2, 4, 21);

  const double loss = evaluate_one(t.builder.graph(), t.inputs, params, t.loss_id).item();
  CHECK(std::isfinite(loss));

  Tensor<double> tok_grad;
  for (const auto& [name, id] : t.grad_nodes) {
    if (name == "embed/tok/kernel") {
      tok_grad = evaluate_one(t.builder.graph(), t.inputs, params, id);
    }
  }
  REQUIRE(tok_grad.numel() == 11 * 8);

  // Rows for vocabulary entries absent from the batch still receive gradient
  // through the output projection, which only happens when the head is tied.
  double off_batch = 0.0;
  std::vector<bool> used(static_cast<std::size_t>(spec.vocab_size), false);
  const Tensor<double>& tokens = t.inputs.at("tokens");
  for (std::int64_t i = 0; i < tokens.numel(); ++i) {
    used[static_cast<std::size_t>(tokens[i])] = true;
  }
  for (std::int64_t v = 0; v < spec.vocab_size; ++v) {
    if (used[static_cast<std::size_t>(v)]) continue;
    for (std::int64_t d = 0; d < spec.d_model; ++d) {
      off_batch = std::max(off_batch, std::abs(tok_grad[v * spec.d_model + d]));
    }
  }
  CHECK(off_batch > 0.0);

  DeviceMesh mesh = build_mesh(1, 2, 1);
  ShardingPlan plan = derive_plan(params, 2, spec.overrides);
  TrainState<double> state = shard_params(params, plan, mesh);
  SpmdParamMap<double> views = replica_param_views(state, mesh, 0);
  auto result = spmd_forward_backward(t.builder.graph(), t.loss_id, t.grad_nodes, t.inputs,
                                      views, mesh, mesh.mp_group(0), nullptr);
  CHECK(std::abs(result.loss - loss) < 1e-10);
}

TEST_CASE("transformer builder rejects invalid dimensions") {
  const ModelSpec spec = tiny_spec();
  GraphBuilder<double> b;
  CHECK_THROWS_AS(transformer_logits(b, spec, 2, 7), ConfigError);
  CHECK_THROWS_AS(transformer_logits(b, spec, 0, 4), ConfigError);
  CHECK_THROWS_AS(transformer_logits(b, spec, 2, 0), ConfigError);
}
