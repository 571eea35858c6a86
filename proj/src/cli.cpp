#include "shardweave/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "shardweave/audit.hpp"
#include "shardweave/autodiff.hpp"
#include "shardweave/errors.hpp"
#include "shardweave/eval.hpp"
#include "shardweave/examples.hpp"
#include "shardweave/model.hpp"
#include "shardweave/model_spec.hpp"
#include "shardweave/pipeline.hpp"
#include "shardweave/plan.hpp"

namespace shardweave {

namespace {

struct PlanFlags {
  std::string model_spec;
  int n_shards = 1;
  std::string out_path;
};

struct AuditFlags {
  std::string model_spec;
  std::string plan_path;
  std::string workdir = ".";
  int mp = 1;
  int dp = 1;
  int steps = 10;
  std::int64_t batch = 8;
  std::int64_t seq_len = 6;
  double lr = 1e-3;
  std::uint64_t seed = 42;
  std::string dtype = "f64";
  bool baseline = false;
};

struct RunFlags {
  std::string example;
  std::string workdir;
  std::string ckpt;
  std::uint64_t seed = 42;
  int steps = -1;
  int dp = 1;
  int mp = 1;
  std::int64_t per_device_batch = -1;
  int accumulate = -1;
  double warmup_rate = 0.1;
  double lr = -1.0;
  double weight_decay = 0.01;
  std::string dtype;
  std::int64_t eval_count = -1;
  std::vector<std::string> prompts;
  std::int64_t gen_len = 24;
  std::int64_t count = 10;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3e", v);
  return buf;
}

bool known_example(const std::string& name) {
  return name == "char-lm" || name == "seq2seq-copy" || name == "maml-sinusoid";
}

void apply_example_defaults(RunFlags& f) {
  if (f.workdir.empty()) f.workdir = "runs/" + f.example;
  if (f.example == "maml-sinusoid") {
    if (f.steps < 0) f.steps = 500;
    if (f.per_device_batch < 0) f.per_device_batch = 1;
    if (f.accumulate < 0) f.accumulate = 4;
    if (f.lr < 0) f.lr = 1e-3;
    if (f.dtype.empty()) f.dtype = "f64";
    if (f.eval_count < 0) f.eval_count = 40;
    return;
  }
  if (f.steps < 0) f.steps = f.example == "char-lm" ? 300 : 400;
  if (f.per_device_batch < 0) f.per_device_batch = 8;
  if (f.accumulate < 0) f.accumulate = 1;
  if (f.lr < 0) f.lr = 3e-3;
  if (f.dtype.empty()) f.dtype = "f32";
  if (f.eval_count < 0) f.eval_count = 64;
}

/// Built-in toy transformer for audits run without a model spec file. Sized
/// so every split survives four-way sharding.
ModelSpec default_audit_model() {
  ModelSpec model;
  model.vocab_size = 17;
  model.n_layers = 2;
  model.d_model = 16;
  model.n_heads = 4;
  model.d_ff = 32;
  model.max_seq_len = 8;
  return model;
}

std::string slurp(const std::string& path, const char* who) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(std::string(who) + ": cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

// ---------------------------------------------------------------------------
// plan

int cmd_plan(const PlanFlags& f, std::ostream& out, std::ostream& err) {
  const ModelSpec model = read_model_spec(f.model_spec);
  const ShapeMap shapes = transformer_param_shapes(model);
  RoleInference inference = infer_roles(shapes, model.overrides);
  ShardingPlan plan = derive_plan(inference.roles, shapes, f.n_shards);
  for (const auto& warning : inference.warnings) err << "warning: " << warning << "\n";
  for (const auto& warning : plan.warnings) err << "warning: " << warning << "\n";

  const std::string text = serialize_plan(plan);
  if (f.out_path.empty()) {
    out << text;
  } else {
    std::ofstream plan_file(f.out_path, std::ios::trunc);
    if (!plan_file) throw ConfigError("plan: cannot write '" + f.out_path + "'");
    plan_file << text;
    out << "wrote " << f.out_path << "\n";
  }

  std::unordered_map<std::string, Shape> by_name;
  std::size_t width = 0;
  for (const auto& [name, shape] : shapes) {
    by_name.emplace(name, shape);
    width = std::max(width, name.size());
  }
  out << "\nshard sizes (" << f.n_shards << "-way):\n";
  std::int64_t per_device = 0;
  for (const auto& entry : plan.entries) {
    const std::int64_t n = shape_numel(by_name.at(entry.name));
    const std::int64_t local = entry.partition.is_split() ? n / f.n_shards : n;
    per_device += local;
    const std::string layout = entry.partition.is_split()
                                   ? "split:" + std::to_string(entry.partition.dim)
                                   : "replicated";
    out << "  " << entry.name << std::string(width - entry.name.size(), ' ') << "  " << layout
        << std::string(12 - layout.size(), ' ') << n << " -> " << local << " per device\n";
  }
  out << "per-device parameter elements: " << per_device << "\n";
  out << "per-device state elements with adamw moments: "
      << expected_state_elements(plan, shapes, f.n_shards) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// audit

/// Baseline layout that ignores the alternating rules: every kernel splits
/// along dim 0 when it divides evenly, so consecutive layers force gathers.
ShardingPlan same_dim_baseline(const ShapeMap& shapes, int n_shards) {
  ShardingPlan plan;
  plan.n_shards = n_shards;
  for (const auto& [name, shape] : shapes) {
    const bool splittable = shape.size() >= 2 && shape[0] % n_shards == 0;
    plan.entries.push_back({name, splittable ? Partition::split(0) : Partition::replicated()});
  }
  return plan;
}

template <typename Scalar>
int cmd_audit_t(const AuditFlags& f, std::ostream& out, std::ostream& err) {
  const ModelSpec model =
      f.model_spec.empty() ? default_audit_model() : read_model_spec(f.model_spec);
  if (f.dp < 1 || f.mp < 1) {
    err << "audit: --dp and --mp must be positive\n";
    return 2;
  }
  if (f.batch < 1 || f.batch % f.dp != 0) {
    err << "audit: --batch must be a positive multiple of --dp\n";
    return 2;
  }
  const std::int64_t rows = f.batch / f.dp;

  const ParamTree<Scalar> init =
      init_transformer_params<Scalar>(model, RngStream(f.seed, "model-init"));
  GraphBuilder<Scalar> builder;
  auto loss = transformer_loss(builder, model, rows, f.seq_len);
  const auto grad_nodes = grad(builder, loss, shapes_of(init));

  ShardingPlan plan;
  if (f.plan_path.empty()) {
    plan = derive_plan(init, f.mp, model.overrides);
  } else {
    plan = parse_plan(slurp(f.plan_path, "audit"), f.mp);
  }

  const DeviceMesh mesh = build_mesh(f.dp, f.mp, 1);
  AdamWConfig optimizer;
  optimizer.lr = f.lr;
  optimizer.weight_decay = 0.01;

  const RngStream batch_root(f.seed, "audit-batch");
  const auto batch_for_step = [&](int step) {
    RngStream rng = batch_root.child(static_cast<std::uint64_t>(step));
    const auto vocab = static_cast<std::uint64_t>(model.vocab_size);
    Tensor<Scalar> tokens = Tensor<Scalar>::zeros({f.batch, f.seq_len});
    Tensor<Scalar> targets = Tensor<Scalar>::zeros({f.batch, f.seq_len});
    for (std::int64_t i = 0; i < tokens.numel(); ++i) {
      tokens[i] = static_cast<Scalar>(rng.next_below(vocab));
    }
    for (std::int64_t i = 0; i < targets.numel(); ++i) {
      targets[i] = static_cast<Scalar>(rng.next_below(vocab));
    }
    InputMap<Scalar> inputs;
    inputs.emplace("tokens", std::move(tokens));
    inputs.emplace("targets", std::move(targets));
    inputs.emplace("weights", Tensor<Scalar>::full({f.batch, f.seq_len}, Scalar(1)));
    return inputs;
  };

  const AuditResult result = audit_equivalence<Scalar>(builder.graph(), loss.id, grad_nodes,
                                                       batch_for_step, init, plan, mesh,
                                                       optimizer, f.steps);

  const double tolerance = f.dtype == "f64" ? 1e-10 : 1e-4;
  std::filesystem::create_directories(f.workdir);
  const std::string csv_path = f.workdir + "/comm_report.csv";
  {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw ConfigError("audit: cannot write '" + csv_path + "'");
    csv << result.comm.to_csv();
  }

  out << "audit: dp=" << f.dp << " mp=" << f.mp << " dtype=" << f.dtype << " steps=" << f.steps
      << " batch=" << f.batch << " seq=" << f.seq_len << "\n";
  out << "  loss deviation   " << sci(result.loss.value) << "  (" << result.loss.tensor << ")\n";
  out << "  grad deviation   " << sci(result.grads.value) << "  (" << result.grads.tensor
      << ")\n";
  out << "  param deviation  " << sci(result.params.value) << "  (" << result.params.tensor
      << ")\n";
  out << "  collectives: count=" << result.comm.total().count
      << " payload_bytes=" << result.comm.total().payload_bytes
      << " wire_bytes=" << result.comm.total().wire_bytes << "\n";
  out << "  comm report: " << csv_path << "\n";

  bool pass = result.within(tolerance);
  if (!pass) {
    out << "  worst offender: " << result.worst() << " from "
        << (result.grads.value >= result.params.value ? result.grads.tensor
                                                      : result.params.tensor)
        << "\n";
  }

  if (f.baseline) {
    if (f.mp < 2) {
      err << "audit: --baseline needs --mp >= 2\n";
      return 2;
    }
    const ShardingPlan base = same_dim_baseline(shapes_of(init), f.mp);
    const AuditResult base_result = audit_equivalence<Scalar>(
        builder.graph(), loss.id, grad_nodes, batch_for_step, init, base, mesh, optimizer,
        f.steps);
    const std::uint64_t rule_payload = result.comm.total().payload_bytes;
    const std::uint64_t base_payload = base_result.comm.total().payload_bytes;
    out << "  baseline payload_bytes=" << base_payload << " vs rule payload_bytes="
        << rule_payload << "\n";
    if (rule_payload >= base_payload) {
      out << "  FAIL: rule-based plan does not beat the same-dim baseline\n";
      pass = false;
    }
  }

  if (pass) {
    out << "audit PASS (tolerance " << sci(tolerance) << ")\n";
    return 0;
  }
  out << "audit FAIL (tolerance " << sci(tolerance) << ")\n";
  return 1;
}

// ---------------------------------------------------------------------------
// train

template <typename Scalar, typename Example, typename Output>
int fit_and_report(Deployer<Scalar>& deployer, PipelineSpec<Scalar, Example, Output> spec,
                   const RunConfig& config, const ParamTree<Scalar>& init,
                   const std::vector<Example>& train_examples,
                   const std::vector<Example>& eval_examples, const RunFlags& f,
                   std::ostream& out) {
  Trainer<Scalar, Example, Output> trainer(deployer, std::move(spec), config, init);
  const TrainResult result = trainer.fit(train_examples, eval_examples);

  const std::string metrics_path = deployer.workdir() + "/metrics.txt";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw ConfigError("train: cannot write '" + metrics_path + "'");
  metrics << "final_train_loss = " << detail::format_float(result.step_losses.back()) << "\n";
  if (!result.eval_history.empty()) {
    for (const auto& [name, value] : result.eval_history.back().metrics) {
      metrics << name << " = " << detail::format_float(value) << "\n";
    }
  }

  out << "train " << f.example << ": " << result.step_losses.size() << " steps on "
      << deployer.mesh().device_count() << " devices (dp=" << deployer.mesh().dp_size()
      << ", mp=" << deployer.mesh().mp_size() << ", dtype=" << f.dtype << ")\n";
  out << "final train loss = " << detail::format_float(result.step_losses.back()) << "\n";
  if (!result.eval_history.empty()) {
    out << "eval:";
    for (const auto& [name, value] : result.eval_history.back().metrics) {
      out << " " << name << "=" << detail::format_float(value);
    }
    out << "\n";
  }
  out << "run log: " << result.log_path << "\n";
  out << "metrics: " << metrics_path << "\n";
  for (const auto& path : result.checkpoints) out << "checkpoint: " << path << "\n";
  return 0;
}

template <typename Scalar>
int cmd_train_t(const RunFlags& f, std::ostream& out) {
  DeployerConfig dc;
  dc.devices_per_host = f.dp * f.mp;
  dc.n_model_shards = f.mp;
  dc.seed = f.seed;
  dc.workdir = f.workdir;
  Deployer<Scalar> deployer(dc);

  RunConfig config;
  config.per_device_batch_size = f.per_device_batch;
  config.accumulate_grad_batches = f.accumulate;
  config.warmup_rate = f.warmup_rate;
  config.optimizer.lr = f.lr;
  config.optimizer.weight_decay = f.weight_decay;

  const std::int64_t needed = static_cast<std::int64_t>(f.steps) * f.per_device_batch * f.dp *
                              f.accumulate;

  if (f.example == "char-lm") {
    CharLmExample<Scalar> ex;
    config.save_argmax_ckpt_by_metrics = {"acc"};
    return fit_and_report<Scalar>(deployer, ex.pipeline(), config,
                                  init_transformer_params<Scalar>(ex.model,
                                                                  deployer.stream("model-init")),
                                  ex.train_windows(needed), ex.eval_windows(f.eval_count), f,
                                  out);
  }
  if (f.example == "seq2seq-copy") {
    CopyTaskExample<Scalar> ex;
    config.save_argmax_ckpt_by_metrics = {"copy_acc"};
    return fit_and_report<Scalar>(deployer, ex.pipeline(), config,
                                  init_transformer_params<Scalar>(ex.model,
                                                                  deployer.stream("model-init")),
                                  ex.sample_pairs(deployer.stream("train-data"), needed),
                                  ex.sample_pairs(deployer.stream("eval-data"), f.eval_count), f,
                                  out);
  }

  MamlSinusoidExample<Scalar> ex;
  const double adapted = maml_quadratic_adapted_theta(1.0, 0.1);
  out << "maml quadratic check: theta=1 alpha=0.1 loss=theta^2 -> adapted theta = "
      << detail::format_float(adapted) << "\n";
  config.save_argmax_ckpt_by_metrics = {"improved"};
  return fit_and_report<Scalar>(deployer, ex.pipeline(), config,
                                ex.init_params(deployer.stream("model-init")),
                                ex.sample_tasks(deployer.stream("train-data"), needed),
                                ex.sample_tasks(deployer.stream("eval-data"), f.eval_count), f,
                                out);
}

int cmd_train(RunFlags f, std::ostream& out, std::ostream& err) {
  if (!known_example(f.example)) {
    err << "train: unknown example '" << f.example
        << "' (expected char-lm, seq2seq-copy, or maml-sinusoid)\n";
    return 2;
  }
  apply_example_defaults(f);
  if (f.steps < 1) {
    err << "train: --steps must be positive\n";
    return 2;
  }
  if (f.dtype == "f64") return cmd_train_t<double>(f, out);
  return cmd_train_t<float>(f, out);
}

// ---------------------------------------------------------------------------
// predict

template <typename Scalar>
int cmd_predict_t(const RunFlags& f, std::ostream& out) {
  DeployerConfig dc;
  dc.devices_per_host = f.dp * f.mp;
  dc.n_model_shards = f.mp;
  dc.seed = f.seed;
  dc.workdir = f.workdir;
  Deployer<Scalar> deployer(dc);

  RunConfig config;
  config.per_device_batch_size = 1;
  const std::string ckpt = f.ckpt.empty() ? f.workdir + "/last.ckpt" : f.ckpt;
  const std::string pred_path = deployer.workdir() + "/predictions.txt";
  std::ofstream pred_file(pred_path, std::ios::trunc);
  if (!pred_file) throw ConfigError("predict: cannot write '" + pred_path + "'");
  const auto emit = [&](const std::string& line) {
    out << line << "\n";
    pred_file << line << "\n";
  };

  if (f.example == "char-lm") {
    CharLmExample<Scalar> ex;
    Trainer<Scalar, CharWindow, std::string> trainer(
        deployer, ex.pipeline(), config,
        init_transformer_params<Scalar>(ex.model, deployer.stream("model-init")));
    trainer.load(ckpt);
    auto predictor = trainer.predictor();

    const std::vector<std::string> prompts =
        f.prompts.empty() ? std::vector<std::string>{"the tide ", "the market ", "rain "}
                          : f.prompts;
    const std::int64_t T = ex.seq_len;
    for (const std::string& prompt : prompts) {
      if (prompt.empty()) throw ConfigError("predict: --prompt must not be empty");
      std::vector<int> context;
      for (char c : prompt) context.push_back(ex.encode(c));
      std::string generated;
      for (std::int64_t i = 0; i < f.gen_len; ++i) {
        CharWindow window;
        window.tokens.assign(static_cast<std::size_t>(T) + 1, 0);
        const std::size_t take = std::min(context.size(), static_cast<std::size_t>(T));
        for (std::size_t j = 0; j < take; ++j) {
          window.tokens[j] = context[context.size() - take + j];
        }
        const std::vector<std::string> outs = predictor.predict(trainer.state(), {window}, 1);
        const char next = outs[0][take - 1];
        generated.push_back(next);
        context.push_back(ex.encode(next));
      }
      emit(prompt + "|" + generated);
    }
    return 0;
  }

  if (f.example == "seq2seq-copy") {
    CopyTaskExample<Scalar> ex;
    Trainer<Scalar, CopyPair, std::string> trainer(
        deployer, ex.pipeline(), config,
        init_transformer_params<Scalar>(ex.model, deployer.stream("model-init")));
    trainer.load(ckpt);
    const ParamTree<Scalar> params = trainer.params();

    const std::int64_t S = ex.src_len;
    const std::int64_t T = ex.seq_len();
    GraphBuilder<Scalar> builder;
    auto next = argmax(transformer_logits(builder, ex.model, 1, T));

    const std::vector<CopyPair> pairs =
        ex.sample_pairs(deployer.stream("predict-data"), f.count);
    std::int64_t exact = 0;
    for (const CopyPair& pair : pairs) {
      std::vector<int> window(static_cast<std::size_t>(T), 0);
      for (std::int64_t t = 0; t < S; ++t) window[static_cast<std::size_t>(t)] = pair.src[static_cast<std::size_t>(t)];
      window[static_cast<std::size_t>(S)] = ex.sep_token();
      for (std::int64_t i = 0; i < S; ++i) {
        Tensor<Scalar> tokens = Tensor<Scalar>::zeros({1, T});
        for (std::int64_t t = 0; t < T; ++t) {
          tokens[t] = static_cast<Scalar>(window[static_cast<std::size_t>(t)]);
        }
        InputMap<Scalar> inputs;
        inputs.emplace("tokens", std::move(tokens));
        const Tensor<Scalar> ids = evaluate_one(builder.graph(), inputs, params, next.id);
        window[static_cast<std::size_t>(S + 1 + i)] = static_cast<int>(ids[S + i]);
      }
      std::vector<int> decoded(window.begin() + static_cast<std::ptrdiff_t>(S) + 1,
                               window.end());
      const bool ok = decoded == pair.src;
      exact += ok ? 1 : 0;
      emit(ex.decode(pair.src) + "|" + ex.decode(decoded) + "|" + (ok ? "ok" : "mismatch"));
    }
    emit("exact copies: " + std::to_string(exact) + "/" + std::to_string(pairs.size()));
    return 0;
  }

  MamlSinusoidExample<Scalar> ex;
  Trainer<Scalar, SinusoidTask, std::vector<double>> trainer(
      deployer, ex.pipeline(), config, ex.init_params(deployer.stream("model-init")));
  trainer.load(ckpt);
  auto predictor = trainer.predictor();

  const std::vector<SinusoidTask> tasks =
      ex.sample_tasks(deployer.stream("predict-tasks"), f.count);
  const std::vector<std::vector<double>> outputs =
      predictor.predict(trainer.state(), tasks, 1);
  std::int64_t improved = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::vector<double>& qy = tasks[i].query_y;
    const std::size_t kq = qy.size();
    double pre_mse = 0.0;
    double post_mse = 0.0;
    for (std::size_t j = 0; j < kq; ++j) {
      pre_mse += (outputs[i][j] - qy[j]) * (outputs[i][j] - qy[j]);
      post_mse += (outputs[i][kq + j] - qy[j]) * (outputs[i][kq + j] - qy[j]);
    }
    pre_mse /= static_cast<double>(kq);
    post_mse /= static_cast<double>(kq);
    improved += post_mse < pre_mse ? 1 : 0;
    emit("task " + std::to_string(i) + ": amplitude=" + detail::format_float(tasks[i].amplitude) +
         " pre_mse=" + detail::format_float(pre_mse) +
         " post_mse=" + detail::format_float(post_mse));
  }
  emit("improved: " + std::to_string(improved) + "/" + std::to_string(tasks.size()));
  return 0;
}

int cmd_predict(RunFlags f, std::ostream& out, std::ostream& err) {
  if (!known_example(f.example)) {
    err << "predict: unknown example '" << f.example
        << "' (expected char-lm, seq2seq-copy, or maml-sinusoid)\n";
    return 2;
  }
  apply_example_defaults(f);
  if (f.dtype == "f64") return cmd_predict_t<double>(f, out);
  return cmd_predict_t<float>(f, out);
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"simulated tensor-parallel training: sharding plans, equivalence audits, and "
               "example pipelines"};
  app.name("shardweave");
  app.require_subcommand(1);

  PlanFlags pf;
  CLI::App* plan_cmd = app.add_subcommand("plan", "derive a sharding plan from a model spec");
  plan_cmd->add_option("--model-spec", pf.model_spec, "model spec file")->required();
  plan_cmd->add_option("--n-shards", pf.n_shards, "number of model shards")
      ->required()
      ->check(CLI::PositiveNumber);
  plan_cmd->add_option("--out", pf.out_path, "write the plan to this file");

  AuditFlags af;
  CLI::App* audit_cmd =
      app.add_subcommand("audit", "compare sharded training against the single-device reference");
  audit_cmd->add_option("--model-spec", af.model_spec,
                        "model spec file (default: built-in toy model)");
  audit_cmd->add_option("--mp,--n_model_shards", af.mp, "model-parallel shard count");
  audit_cmd->add_option("--dp", af.dp, "data-parallel replica count");
  audit_cmd->add_option("--steps", af.steps, "optimizer steps to compare")
      ->check(CLI::PositiveNumber);
  audit_cmd->add_option("--batch", af.batch, "global batch rows");
  audit_cmd->add_option("--seq-len", af.seq_len, "sequence length");
  audit_cmd->add_option("--lr", af.lr, "learning rate");
  audit_cmd->add_option("--seed", af.seed, "global seed");
  audit_cmd->add_option("--dtype", af.dtype, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  audit_cmd->add_option("--plan", af.plan_path, "use this plan file instead of deriving one");
  audit_cmd->add_flag("--baseline", af.baseline,
                      "also audit the same-dim baseline plan and compare payload bytes");
  audit_cmd->add_option("--workdir", af.workdir, "directory for comm_report.csv");

  const auto add_run_flags = [](CLI::App* cmd, RunFlags& flags) {
    cmd->add_option("example", flags.example, "char-lm | seq2seq-copy | maml-sinusoid")
        ->required();
    cmd->add_option("--workdir", flags.workdir, "run directory (default runs/<example>)");
    cmd->add_option("--seed", flags.seed, "global seed");
    cmd->add_option("--dp", flags.dp, "data-parallel replica count")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--mp,--n_model_shards", flags.mp, "model-parallel shard count")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--dtype", flags.dtype, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
  };

  RunFlags tf;
  CLI::App* train_cmd = app.add_subcommand("train", "train a shipped example");
  add_run_flags(train_cmd, tf);
  train_cmd->add_option("--steps", tf.steps, "optimizer steps to run");
  train_cmd->add_option("--per_device_batch_size", tf.per_device_batch, "rows per device");
  train_cmd->add_option("--accumulate_grad_batches", tf.accumulate,
                        "micro-batches per optimizer step");
  train_cmd->add_option("--warmup_rate", tf.warmup_rate,
                        "fraction of steps spent in linear warmup");
  train_cmd->add_option("--lr", tf.lr, "peak learning rate");
  train_cmd->add_option("--weight_decay", tf.weight_decay, "adamw weight decay");
  train_cmd->add_option("--eval_examples", tf.eval_count, "held-out examples per eval");

  RunFlags prf;
  CLI::App* predict_cmd =
      app.add_subcommand("predict", "run predictions from a trained checkpoint");
  add_run_flags(predict_cmd, prf);
  predict_cmd->add_option("--ckpt", prf.ckpt, "checkpoint path (default <workdir>/last.ckpt)");
  predict_cmd->add_option("--prompt", prf.prompts, "char-lm prompt (repeatable)");
  predict_cmd->add_option("--length", prf.gen_len, "char-lm continuation length")
      ->check(CLI::PositiveNumber);
  predict_cmd->add_option("--count", prf.count, "examples or tasks to predict")
      ->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (plan_cmd->parsed()) return cmd_plan(pf, out, err);
    if (audit_cmd->parsed()) {
      return af.dtype == "f32" ? cmd_audit_t<float>(af, out, err)
                               : cmd_audit_t<double>(af, out, err);
    }
    if (train_cmd->parsed()) return cmd_train(tf, out, err);
    return cmd_predict(prf, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const PartitionError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const NonFiniteError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace shardweave
