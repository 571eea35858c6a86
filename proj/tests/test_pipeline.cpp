#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "shardweave/eval.hpp"
#include "shardweave/pipeline.hpp"
#include "doctest.h"

using namespace shardweave;

namespace {

struct RegExample {
  std::array<double, 4> x;
  std::array<double, 2> y;
};

using RegSpec = PipelineSpec<double, RegExample, std::vector<double>>;
using RegTrainer = Trainer<double, RegExample, std::vector<double>>;
using RegPredictor = Predictor<double, RegExample, std::vector<double>>;

std::vector<RegExample> make_dataset(int n, std::uint64_t seed) {
  const double a[2][4] = {{0.5, -0.3, 0.8, 0.1}, {-0.6, 0.4, 0.2, -0.7}};
  RngStream rng(seed, "pipe-data");
  std::vector<RegExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RegExample e;
    for (auto& v : e.x) v = rng.next_normal();
    for (int j = 0; j < 2; ++j) {
      e.y[static_cast<std::size_t>(j)] = 0.0;
      for (int k = 0; k < 4; ++k) {
        e.y[static_cast<std::size_t>(j)] += a[j][k] * e.x[static_cast<std::size_t>(k)];
      }
    }
    out.push_back(e);
  }
  return out;
}

ParamTree<double> make_init(std::uint64_t seed) {
  RngStream rng(seed, "pipe-init");
  ParamTree<double> tree;
  auto fill = [&rng](const Shape& shape) {
    Tensor<double> t = Tensor<double>::zeros(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.next_normal() * 0.3;
    return t;
  };
  tree.add("mlp/fc1/kernel", fill({8, 4}));
  tree.add("mlp/fc1/bias", fill({8}));
  tree.add("mlp/fc2/kernel", fill({2, 8}));
  tree.add("mlp/fc2/bias", fill({2}));
  return tree;
}

const Shape& shape_of(const ShapeMap& shapes, const std::string& name) {
  for (const auto& [n, s] : shapes) {
    if (n == name) return s;
  }
  throw ConfigError("test: no collated input named '" + name + "'");
}

template <typename Scalar>
Val<Scalar> mlp_forward(GraphBuilder<Scalar>& b, Val<Scalar> x) {
  Val<Scalar> w1 = b.param("mlp/fc1/kernel", {8, 4});
  Val<Scalar> b1 = b.param("mlp/fc1/bias", {8});
  Val<Scalar> w2 = b.param("mlp/fc2/kernel", {2, 8});
  Val<Scalar> b2 = b.param("mlp/fc2/bias", {2});
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

RegSpec make_spec() {
  RegSpec spec;
  spec.collate_fn = [](const std::vector<RegExample>& batch) {
    const auto rows = static_cast<std::int64_t>(batch.size());
    Tensor<double> x = Tensor<double>::zeros({rows, 4});
    Tensor<double> target = Tensor<double>::zeros({rows, 2});
    for (std::int64_t i = 0; i < rows; ++i) {
      for (std::int64_t k = 0; k < 4; ++k) {
        x[i * 4 + k] = batch[static_cast<std::size_t>(i)].x[static_cast<std::size_t>(k)];
      }
      for (std::int64_t j = 0; j < 2; ++j) {
        target[i * 2 + j] = batch[static_cast<std::size_t>(i)].y[static_cast<std::size_t>(j)];
      }
    }
    InputMap<double> inputs;
    inputs.emplace("x", std::move(x));
    inputs.emplace("target", std::move(target));
    return inputs;
  };
  spec.loss_fn = [](GraphBuilder<double>& b, const ShapeMap& shapes) {
    Val<double> x = b.input("x", shape_of(shapes, "x"));
    Val<double> target = b.input("target", shape_of(shapes, "target"));
    Val<double> d = sub(mlp_forward(b, x), target);
    return reduce_mean_all(mul(d, d));
  };
  spec.pred_fn = [](GraphBuilder<double>& b, const ShapeMap& shapes) {
    Val<double> x = b.input("x", shape_of(shapes, "x"));
    return RegSpec::NamedVals{{"y", mlp_forward(b, x)}};
  };
  spec.output_fn = [](const RegSpec::NamedTensors& row) {
    const Tensor<double>& y = row.at(0).second;
    return std::vector<double>{y[0], y[1]};
  };
  spec.metric_fn = [](const std::vector<RegExample>& batch,
                      const std::vector<std::vector<double>>& outputs) {
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        const double d = outputs[i][j] - batch[i].y[j];
        sum += d * d;
      }
    }
    RegSpec::Metrics metrics;
    metrics.emplace_back("mse", sum / static_cast<double>(2 * batch.size()));
    return metrics;
  };
  return spec;
}

std::string fresh_dir(const std::string& name) {
  const std::string path = (std::filesystem::temp_directory_path() / name).string();
  std::filesystem::remove_all(path);
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

DeployerConfig deploy_config(const std::string& workdir, int devices, int n_model_shards) {
  DeployerConfig cfg;
  cfg.devices_per_host = devices;
  cfg.n_model_shards = n_model_shards;
  cfg.workdir = workdir;
  return cfg;
}

RunConfig run_config(int n_epochs, std::int64_t per_device_batch) {
  RunConfig cfg;
  cfg.n_epochs = n_epochs;
  cfg.per_device_batch_size = per_device_batch;
  cfg.optimizer.lr = 3e-2;
  cfg.optimizer.weight_decay = 0.01;
  return cfg;
}

bool states_bit_equal(const TrainState<double>& a, const TrainState<double>& b) {
  if (a.step != b.step || a.names != b.names) return false;
  for (std::size_t p = 0; p < a.names.size(); ++p) {
    for (std::size_t d = 0; d < a.params[p].size(); ++d) {
      if (!a.params[p][d].bit_equal(b.params[p][d])) return false;
      if (!a.adam_m[p][d].bit_equal(b.adam_m[p][d])) return false;
      if (!a.adam_v[p][d].bit_equal(b.adam_v[p][d])) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("scheduled_lr warms up linearly then decays to zero") {
  CHECK(scheduled_lr(0, 100, 10, 1.0) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(scheduled_lr(4, 100, 10, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(scheduled_lr(9, 100, 10, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(scheduled_lr(10, 100, 10, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(scheduled_lr(55, 100, 10, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(scheduled_lr(99, 100, 10, 1.0) == doctest::Approx(1.0 / 90.0).epsilon(1e-12));
  CHECK(scheduled_lr(100, 100, 10, 1.0) == 0.0);
  CHECK(scheduled_lr(500, 100, 10, 1.0) == 0.0);

  SUBCASE("no warmup starts at the peak") {
    CHECK(scheduled_lr(0, 100, 0, 2.0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(scheduled_lr(50, 100, 0, 2.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("bad horizon") {
    CHECK_THROWS_AS(scheduled_lr(0, 0, 0, 1.0), ConfigError);
  }
}

TEST_CASE("deployer wires mesh, workdir, and deterministic streams") {
  const std::string dir = fresh_dir("pipe-deployer");
  Deployer<double> a(deploy_config(dir, 4, 2));
  CHECK(a.mesh().device_count() == 4);
  CHECK(a.mesh().mp_size() == 2);
  CHECK(a.mesh().dp_size() == 2);
  CHECK(std::filesystem::exists(dir));

  Deployer<double> b(deploy_config(fresh_dir("pipe-deployer-b"), 4, 2));
  RngStream sa = a.stream("data-shuffle");
  RngStream sb = b.stream("data-shuffle");
  CHECK(sa.child(0).permutation(16) == sb.child(0).permutation(16));
  CHECK(a.stream("train").next_u64() == b.stream("train").next_u64());

  ParamTree<double> tree = make_init(1);
  const ShardingPlan plan = a.plan_for(tree);
  CHECK(plan.at("mlp/fc1/kernel") == Partition::split(0));
  CHECK(plan.at("mlp/fc2/kernel") == Partition::split(1));
  CHECK(plan.at("mlp/fc1/bias") == Partition::replicated());

  SUBCASE("more shards than devices") {
    CHECK_THROWS_AS(Deployer<double>(deploy_config(fresh_dir("pipe-bad"), 8, 16)), ConfigError);
  }
}

TEST_CASE("training is deterministic: identical configs give byte-identical logs") {
  const std::vector<RegExample> train = make_dataset(40, 5);
  const std::vector<RegExample> eval = make_dataset(10, 6);
  RunConfig cfg = run_config(2, 4);
  cfg.save_argmax_ckpt_by_metrics = {"mse"};
  cfg.lower_is_better_metrics = {"mse"};

  std::vector<std::string> logs;
  std::vector<std::vector<double>> losses;
  for (const char* tag : {"pipe-det-a", "pipe-det-b"}) {
    Deployer<double> deployer(deploy_config(fresh_dir(tag), 2, 2));
    RegTrainer trainer(deployer, make_spec(), cfg, make_init(1));
    TrainResult result = trainer.fit(train, eval);
    REQUIRE(result.step_losses.size() == 20);
    logs.push_back(slurp(result.log_path));
    losses.push_back(result.step_losses);
  }
  CHECK(logs[0] == logs[1]);
  CHECK(losses[0] == losses[1]);
  CHECK(logs[0].find("step=0 loss=") != std::string::npos);
  CHECK(logs[0].find("epoch=1 loss=") != std::string::npos);
  CHECK(logs[0].find("mse=") != std::string::npos);
}

TEST_CASE("data parallelism is transparent to the training trajectory") {
  const std::vector<RegExample> train = make_dataset(40, 7);
  const std::vector<RegExample> eval = make_dataset(8, 8);

  Deployer<double> single(deploy_config(fresh_dir("pipe-dp1"), 1, 1));
  RegTrainer trainer_single(single, make_spec(), run_config(2, 4), make_init(2));
  TrainResult r_single = trainer_single.fit(train, eval);

  Deployer<double> dual(deploy_config(fresh_dir("pipe-dp2"), 2, 1));
  RegTrainer trainer_dual(dual, make_spec(), run_config(2, 2), make_init(2));
  TrainResult r_dual = trainer_dual.fit(train, eval);

  REQUIRE(r_single.step_losses.size() == r_dual.step_losses.size());
  for (std::size_t i = 0; i < r_single.step_losses.size(); ++i) {
    CHECK(std::abs(r_single.step_losses[i] - r_dual.step_losses[i]) <= 1e-10);
  }
  ParamTree<double> p_single = trainer_single.params();
  ParamTree<double> p_dual = trainer_dual.params();
  for (const auto& [name, t] : p_single.entries()) {
    const Tensor<double>& u = p_dual.at(name);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      CHECK(std::abs(t[i] - u[i]) <= 1e-10);
    }
  }
}

TEST_CASE("gradient accumulation matches the equivalent larger batch") {
  const std::vector<RegExample> train = make_dataset(40, 9);
  const std::vector<RegExample> eval = make_dataset(8, 10);

  Deployer<double> big(deploy_config(fresh_dir("pipe-acc1"), 1, 1));
  RegTrainer trainer_big(big, make_spec(), run_config(2, 4), make_init(3));
  TrainResult r_big = trainer_big.fit(train, eval);

  RunConfig micro_cfg = run_config(2, 2);
  micro_cfg.accumulate_grad_batches = 2;
  Deployer<double> micro(deploy_config(fresh_dir("pipe-acc2"), 1, 1));
  RegTrainer trainer_micro(micro, make_spec(), micro_cfg, make_init(3));
  TrainResult r_micro = trainer_micro.fit(train, eval);

  REQUIRE(r_big.step_losses.size() == r_micro.step_losses.size());
  for (std::size_t i = 0; i < r_big.step_losses.size(); ++i) {
    CHECK(std::abs(r_big.step_losses[i] - r_micro.step_losses[i]) <= 1e-10);
  }
  ParamTree<double> p_big = trainer_big.params();
  ParamTree<double> p_micro = trainer_micro.params();
  for (const auto& [name, t] : p_big.entries()) {
    const Tensor<double>& u = p_micro.at(name);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      CHECK(std::abs(t[i] - u[i]) <= 1e-10);
    }
  }
}

TEST_CASE("checkpoint resume reproduces the uninterrupted run bit-exactly") {
  const std::vector<RegExample> train = make_dataset(40, 11);
  const std::vector<RegExample> eval = make_dataset(10, 12);
  const RunConfig cfg = run_config(4, 4);
  const ParamTree<double> init = make_init(4);

  Deployer<double> dep_full(deploy_config(fresh_dir("pipe-full"), 2, 2));
  RegTrainer full(dep_full, make_spec(), cfg, init);
  TrainResult r_full = full.fit(train, eval);
  REQUIRE(full.state().step == 40);

  const std::string dir_first = fresh_dir("pipe-first");
  Deployer<double> dep_first(deploy_config(dir_first, 2, 2));
  RegTrainer first(dep_first, make_spec(), cfg, init);
  TrainResult r_first = first.fit(train, eval, 2);
  REQUIRE(first.state().step == 20);

  Deployer<double> dep_resumed(deploy_config(fresh_dir("pipe-resumed"), 2, 2));
  RegTrainer resumed(dep_resumed, make_spec(), cfg, init);
  resumed.load(dir_first + "/last.ckpt");
  TrainResult r_resumed = resumed.fit(train, eval);

  CHECK(states_bit_equal(full.state(), resumed.state()));
  CHECK(slurp(r_first.log_path) + slurp(r_resumed.log_path) == slurp(r_full.log_path));
}

TEST_CASE("epoch eval aggregates remainder batches into the exact mean") {
  const std::vector<RegExample> train = make_dataset(24, 13);
  const std::vector<RegExample> eval = make_dataset(10, 14);
  RunConfig cfg = run_config(2, 4);
  cfg.save_argmax_ckpt_by_metrics = {"mse"};
  cfg.lower_is_better_metrics = {"mse"};

  const std::string dir = fresh_dir("pipe-eval");
  Deployer<double> deployer(deploy_config(dir, 2, 2));
  RegTrainer trainer(deployer, make_spec(), cfg, make_init(5));
  TrainResult result = trainer.fit(train, eval);

  REQUIRE(result.eval_history.size() == 2);
  for (const EpochMetrics& em : result.eval_history) {
    REQUIRE(em.metrics.size() == 2);
    CHECK(em.metrics[0].first == "loss");
    CHECK(em.metrics[1].first == "mse");
  }
  CHECK(std::filesystem::exists(dir + "/last.ckpt"));
  CHECK(std::filesystem::exists(dir + "/best_mse.ckpt"));

  const RegSpec spec = make_spec();
  InputMap<double> all = spec.collate_fn(eval);
  GraphBuilder<double> b;
  Val<double> loss = spec.loss_fn(b, detail::input_shapes_sorted(all));
  const double expected =
      evaluate_one(b.take(), all, trainer.params(), loss.id).item();
  const double reported = result.eval_history.back().metrics[0].second;
  CHECK(std::abs(reported - expected) <= 1e-12);
}

TEST_CASE("training reduces the eval loss on a learnable task") {
  const std::vector<RegExample> train = make_dataset(48, 15);
  const std::vector<RegExample> eval = make_dataset(12, 16);
  Deployer<double> deployer(deploy_config(fresh_dir("pipe-learn"), 2, 2));
  RegTrainer trainer(deployer, make_spec(), run_config(6, 4), make_init(6));
  TrainResult result = trainer.fit(train, eval);
  REQUIRE(result.eval_history.size() == 6);
  const double initial = result.eval_history.front().metrics[0].second;
  const double final_loss = result.eval_history.back().metrics[0].second;
  CHECK(final_loss < 0.5 * initial);
}

TEST_CASE("predictor pads the last batch, strips it, and keeps order") {
  const std::vector<RegExample> train = make_dataset(24, 17);
  const std::vector<RegExample> eval = make_dataset(8, 18);
  Deployer<double> deployer(deploy_config(fresh_dir("pipe-pred"), 2, 2));
  RegTrainer trainer(deployer, make_spec(), run_config(1, 4), make_init(7));
  trainer.fit(train, eval);

  const std::vector<RegExample> queries = make_dataset(10, 19);
  RegPredictor predictor = trainer.predictor();
  const std::vector<std::vector<double>> by4 = predictor.predict(trainer.state(), queries, 4);
  REQUIRE(by4.size() == 10);

  const RegSpec spec = make_spec();
  ParamTree<double> params = trainer.params();
  for (std::size_t i = 0; i < queries.size(); ++i) {
    GraphBuilder<double> b;
    InputMap<double> one = spec.collate_fn({queries[i]});
    RegSpec::NamedVals named = spec.pred_fn(b, detail::input_shapes_sorted(one));
    Tensor<double> expected = evaluate_one(b.take(), one, params, named[0].second.id);
    CHECK(std::abs(by4[i][0] - expected[0]) <= 1e-12);
    CHECK(std::abs(by4[i][1] - expected[1]) <= 1e-12);
  }

  SUBCASE("batch size does not change predictions") {
    const std::vector<std::vector<double>> by10 =
        predictor.predict(trainer.state(), queries, 10);
    const std::vector<std::vector<double>> by3 = predictor.predict(trainer.state(), queries, 3);
    REQUIRE(by10.size() == 10);
    REQUIRE(by3.size() == 10);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        CHECK(std::abs(by4[i][j] - by10[i][j]) <= 1e-12);
        CHECK(std::abs(by4[i][j] - by3[i][j]) <= 1e-12);
      }
    }
  }

  SUBCASE("missing pred_fn is rejected") {
    RegSpec no_pred = make_spec();
    no_pred.pred_fn = nullptr;
    RegPredictor bare(deployer, no_pred);
    CHECK_THROWS_AS(bare.predict(trainer.state(), queries, 4), ConfigError);
  }
}

TEST_CASE("trainer rejects invalid configurations") {
  const std::vector<RegExample> train = make_dataset(8, 20);
  const std::string dir = fresh_dir("pipe-invalid");
  Deployer<double> deployer(deploy_config(dir, 1, 1));

  SUBCASE("accumulate must be positive") {
    RunConfig cfg = run_config(1, 2);
    cfg.accumulate_grad_batches = 0;
    CHECK_THROWS_AS(RegTrainer(deployer, make_spec(), cfg, make_init(8)), ConfigError);
  }
  SUBCASE("warmup_rate outside [0, 1]") {
    RunConfig cfg = run_config(1, 2);
    cfg.warmup_rate = 1.5;
    CHECK_THROWS_AS(RegTrainer(deployer, make_spec(), cfg, make_init(8)), ConfigError);
  }
  SUBCASE("batch size must be positive") {
    CHECK_THROWS_AS(RegTrainer(deployer, make_spec(), run_config(1, 0), make_init(8)),
                    ConfigError);
  }
  SUBCASE("n_epochs must be positive") {
    RegTrainer trainer(deployer, make_spec(), run_config(0, 2), make_init(8));
    CHECK_THROWS_AS(trainer.fit(train, train), ConfigError);
  }
  SUBCASE("empty training set") {
    RegTrainer trainer(deployer, make_spec(), run_config(1, 2), make_init(8));
    CHECK_THROWS_AS(trainer.fit({}, train), ConfigError);
  }
  SUBCASE("fewer examples than one optimizer step") {
    RunConfig cfg = run_config(1, 16);
    RegTrainer trainer(deployer, make_spec(), cfg, make_init(8));
    CHECK_THROWS_AS(trainer.fit(train, train), ConfigError);
  }
  SUBCASE("checkpoint metric that is never produced") {
    RunConfig cfg = run_config(1, 2);
    cfg.save_argmax_ckpt_by_metrics = {"bogus"};
    RegTrainer trainer(deployer, make_spec(), cfg, make_init(8));
    CHECK_THROWS_AS(trainer.fit(train, train), ConfigError);
  }
}

TEST_CASE("collate shape drift across equal-size batches is an error") {
  const std::vector<RegExample> train = make_dataset(8, 21);
  Deployer<double> deployer(deploy_config(fresh_dir("pipe-drift"), 1, 1));
  RegSpec spec = make_spec();
  auto calls = std::make_shared<int>(0);
  auto honest = spec.collate_fn;
  spec.collate_fn = [calls, honest](const std::vector<RegExample>& batch) {
    InputMap<double> inputs = honest(batch);
    if (++*calls > 1) {
      inputs.emplace("extra", Tensor<double>::zeros(
                                  {static_cast<std::int64_t>(batch.size()), 3}));
    }
    return inputs;
  };
  RegTrainer trainer(deployer, spec, run_config(1, 2), make_init(9));
  try {
    trainer.fit(train, {});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("drift") != std::string::npos);
  }
}

TEST_CASE("a non-finite loss aborts with the step index") {
  std::vector<RegExample> train = make_dataset(8, 22);
  for (RegExample& e : train) e.x[0] = std::numeric_limits<double>::quiet_NaN();
  Deployer<double> deployer(deploy_config(fresh_dir("pipe-nan"), 1, 1));
  RegTrainer trainer(deployer, make_spec(), run_config(1, 2), make_init(10));
  try {
    trainer.fit(train, {});
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}
