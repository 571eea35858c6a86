#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "shardweave/autodiff.hpp"
#include "shardweave/checkpoint.hpp"
#include "shardweave/eval.hpp"
#include "shardweave/graph.hpp"
#include "shardweave/plan.hpp"
#include "shardweave/rng.hpp"
#include "shardweave/spmd.hpp"
#include "shardweave/train_state.hpp"

namespace shardweave {

/// Linear warmup to `peak` over the first `warmup_steps` updates, then linear
/// decay to zero at `total_steps`. `step` is zero-based.
inline double scheduled_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                           double peak) {
  if (total_steps < 1) {
    throw ConfigError("scheduled_lr: total_steps must be positive, got " +
                      std::to_string(total_steps));
  }
  if (step < warmup_steps) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return 0.0;
  return peak * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

/// User-defined pipeline: collate turns raw examples into named input
/// tensors, loss_fn and pred_fn trace graphs over inputs declared with the
/// collated shapes, output_fn turns one example's gathered output tensors
/// into a user value, and metric_fn scores predictions against the raw
/// examples. Everything else (sharding, batching, accumulation, collectives,
/// checkpoints, logging) is run by the Trainer and Predictor.
template <typename Scalar, typename Example, typename Output = std::string>
struct PipelineSpec {
  using Batch = std::vector<Example>;
  using NamedVals = std::vector<std::pair<std::string, Val<Scalar>>>;
  using NamedTensors = std::vector<std::pair<std::string, Tensor<Scalar>>>;
  using Metrics = std::vector<std::pair<std::string, double>>;

  std::function<InputMap<Scalar>(const Batch&)> collate_fn;
  std::function<Val<Scalar>(GraphBuilder<Scalar>&, const ShapeMap&)> loss_fn;
  std::function<NamedVals(GraphBuilder<Scalar>&, const ShapeMap&)> pred_fn;
  std::function<Output(const NamedTensors&)> output_fn;
  std::function<Metrics(const Batch&, const std::vector<Output>&)> metric_fn;
};

struct RunConfig {
  int n_epochs = 1;
  std::int64_t per_device_batch_size = 1;
  /// Per-device rows for eval and prediction; 0 means per_device_batch_size.
  std::int64_t eval_per_device_batch_size = 0;
  int accumulate_grad_batches = 1;
  /// optimizer.lr is the schedule peak.
  AdamWConfig optimizer;
  double warmup_rate = 0.1;
  /// Metrics whose best-so-far epoch gets an extra checkpoint. Higher is
  /// better unless the metric is also listed in lower_is_better_metrics.
  std::vector<std::string> save_argmax_ckpt_by_metrics;
  std::vector<std::string> lower_is_better_metrics;
  bool worker_threads = false;
};

struct DeployerConfig {
  int n_hosts = 1;
  int devices_per_host = 1;
  int n_model_shards = 1;
  std::uint64_t seed = 42;
  std::string workdir = ".";
};

/// Owns the device mesh, the run directory, the root of all RNG streams, and
/// the communication ledger shared by every pipeline stage.
template <typename Scalar>
class Deployer {
 public:
  explicit Deployer(const DeployerConfig& config) : config_(config) {
    const int devices = config.n_hosts * config.devices_per_host;
    if (devices % config.n_model_shards != 0) {
      throw ConfigError("Deployer: cannot lay out " + std::to_string(config.n_model_shards) +
                        " model shards on " + std::to_string(devices) + " devices");
    }
    mesh_ = build_mesh(config.n_hosts, config.devices_per_host,
                       devices / config.n_model_shards, config.n_model_shards);
    std::filesystem::create_directories(config.workdir);
  }

  const DeviceMesh& mesh() const { return mesh_; }
  std::uint64_t seed() const { return config_.seed; }
  const std::string& workdir() const { return config_.workdir; }
  CommReport& comm_report() { return comm_; }

  /// Derives the sharding layout for a model under this mesh's shard count.
  ShardingPlan plan_for(const ParamTree<Scalar>& params,
                        const std::vector<RoleOverride>& overrides = {}) const {
    return derive_plan(params, mesh_.mp_size(), overrides);
  }

  /// Named deterministic stream rooted at the global seed.
  RngStream stream(const std::string& name) const { return RngStream(config_.seed, name); }

 private:
  DeployerConfig config_;
  DeviceMesh mesh_;
  CommReport comm_;
};

struct EpochMetrics {
  int epoch = 0;
  std::vector<std::pair<std::string, double>> metrics;
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> step_lrs;
  std::vector<EpochMetrics> eval_history;
  std::vector<std::string> checkpoints;
  std::string log_path;
};

namespace detail {

template <typename Scalar>
ShapeMap input_shapes_sorted(const InputMap<Scalar>& inputs) {
  ShapeMap shapes;
  shapes.reserve(inputs.size());
  for (const auto& [name, tensor] : inputs) shapes.emplace_back(name, tensor.shape());
  std::sort(shapes.begin(), shapes.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return shapes;
}

template <typename Scalar>
std::int64_t batch_rows(const InputMap<Scalar>& inputs, const char* who) {
  if (inputs.empty()) throw ConfigError(std::string(who) + ": collate_fn returned no inputs");
  std::int64_t rows = -1;
  for (const auto& [name, tensor] : inputs) {
    if (tensor.rank() == 0) {
      throw ShapeError(std::string(who) + ": collated input '" + name +
                       "' is a scalar; inputs must be batch-major");
    }
    if (rows < 0) rows = tensor.dim(0);
    if (tensor.dim(0) != rows) {
      throw ShapeError(std::string(who) + ": collated inputs disagree on batch size ('" + name +
                       "' has " + std::to_string(tensor.dim(0)) + " rows, expected " +
                       std::to_string(rows) + ")");
    }
  }
  return rows;
}

inline std::string format_float(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail

/// Batched inference over sharded parameters. The final partial batch is
/// padded by repeating the last example so every run uses the traced batch
/// shape; padding rows are stripped from the results, which come back in
/// input order.
template <typename Scalar, typename Example, typename Output = std::string>
class Predictor {
 public:
  using Spec = PipelineSpec<Scalar, Example, Output>;
  using Batch = std::vector<Example>;

  Predictor(Deployer<Scalar>& deployer, Spec spec, bool worker_threads = false)
      : deployer_(&deployer), spec_(std::move(spec)) {
    options_.worker_threads = worker_threads;
  }

  std::vector<Output> predict(const TrainState<Scalar>& state, const Batch& examples,
                              std::int64_t per_device_batch_size) {
    if (!spec_.collate_fn) throw ConfigError("Predictor: collate_fn is not set");
    if (!spec_.pred_fn) throw ConfigError("Predictor: pred_fn is not set");
    if (!spec_.output_fn) throw ConfigError("Predictor: output_fn is not set");
    if (per_device_batch_size < 1) {
      throw ConfigError("Predictor: per_device_batch_size must be positive, got " +
                        std::to_string(per_device_batch_size));
    }
    const DeviceMesh& mesh = deployer_->mesh();
    const std::int64_t n = static_cast<std::int64_t>(examples.size());
    std::vector<Output> out;
    out.reserve(examples.size());

    for (std::int64_t start = 0; start < n; start += per_device_batch_size) {
      const std::int64_t count = std::min(per_device_batch_size, n - start);
      Batch batch(examples.begin() + start, examples.begin() + start + count);
      while (static_cast<std::int64_t>(batch.size()) < per_device_batch_size) {
        batch.push_back(examples.back());
      }
      InputMap<Scalar> inputs = spec_.collate_fn(batch);
      const std::int64_t rows = detail::batch_rows(inputs, "Predictor");
      if (rows != per_device_batch_size) {
        throw ShapeError("Predictor: collate_fn returned " + std::to_string(rows) +
                         " rows for a batch of " + std::to_string(per_device_batch_size) +
                         " examples");
      }
      Program& program = program_for(inputs);

      SpmdInterpreter<Scalar> interp(mesh, mesh.mp_group(0), &deployer_->comm_report(), options_);
      SpmdParamMap<Scalar> views = replica_param_views(state, mesh, 0);
      std::vector<ShardedTensor<Scalar>> values =
          interp.run(program.graph, inputs, views, program.output_ids);
      std::vector<std::pair<std::string, Tensor<Scalar>>> gathered;
      gathered.reserve(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        Tensor<Scalar> full = gather(values[i]);
        if (full.rank() == 0 || full.dim(0) != per_device_batch_size) {
          throw ShapeError("Predictor: pred_fn output '" + program.output_names[i] +
                           "' has shape " + shape_str(full.shape()) + ", expected " +
                           std::to_string(per_device_batch_size) + " batch rows");
        }
        gathered.emplace_back(program.output_names[i], std::move(full));
      }

      for (std::int64_t i = 0; i < count; ++i) {
        typename Spec::NamedTensors row;
        row.reserve(gathered.size());
        for (const auto& [name, tensor] : gathered) {
          Tensor<Scalar> one = kernels::slice(tensor, 0, i, 1);
          Shape flat(one.shape().begin() + 1, one.shape().end());
          row.emplace_back(name, kernels::reshape(one, flat));
        }
        out.push_back(spec_.output_fn(row));
      }
    }
    return out;
  }

 private:
  struct Program {
    Graph<Scalar> graph;
    std::vector<std::string> output_names;
    std::vector<int> output_ids;
    ShapeMap input_shapes;
  };

  Program& program_for(const InputMap<Scalar>& inputs) {
    const std::int64_t rows = detail::batch_rows(inputs, "Predictor");
    ShapeMap shapes = detail::input_shapes_sorted(inputs);
    auto it = cache_.find(rows);
    if (it != cache_.end()) {
      if (it->second.input_shapes != shapes) {
        throw ConfigError("Predictor: collate_fn output shapes drifted for batches of " +
                          std::to_string(rows) + " rows");
      }
      return it->second;
    }
    GraphBuilder<Scalar> b;
    typename Spec::NamedVals named = spec_.pred_fn(b, shapes);
    if (named.empty()) throw ConfigError("Predictor: pred_fn returned no outputs");
    Program program;
    for (const auto& [name, val] : named) {
      program.output_names.push_back(name);
      program.output_ids.push_back(val.id);
    }
    program.graph = b.take();
    program.input_shapes = std::move(shapes);
    return cache_.emplace(rows, std::move(program)).first->second;
  }

  Deployer<Scalar>* deployer_;
  Spec spec_;
  SpmdOptions options_;
  std::map<std::int64_t, Program> cache_;
};

/// Full training loop over a sharded model: per-epoch seeded shuffling,
/// drop-last global batches, gradient accumulation, data-parallel averaging,
/// AdamW with a warmup-then-decay schedule, per-epoch eval and checkpoints.
///
/// n_epochs is an absolute target: a Trainer resumed from a checkpoint runs
/// only the remaining epochs, and the learning-rate schedule spans the full
/// horizon, so an interrupted run continues the exact uninterrupted
/// trajectory. Best-metric bookkeeping is in-memory only and restarts on
/// resume.
template <typename Scalar, typename Example, typename Output = std::string>
class Trainer {
 public:
  using Spec = PipelineSpec<Scalar, Example, Output>;
  using Batch = std::vector<Example>;

  Trainer(Deployer<Scalar>& deployer, Spec spec, RunConfig config,
          const ParamTree<Scalar>& init_params, std::vector<RoleOverride> overrides = {})
      : deployer_(&deployer), spec_(std::move(spec)), config_(config) {
    if (!spec_.collate_fn || !spec_.loss_fn) {
      throw ConfigError("Trainer: collate_fn and loss_fn are required");
    }
    if (config_.per_device_batch_size < 1 || config_.eval_per_device_batch_size < 0) {
      throw ConfigError("Trainer: batch sizes must be positive");
    }
    if (config_.accumulate_grad_batches < 1) {
      throw ConfigError("Trainer: accumulate_grad_batches must be positive, got " +
                        std::to_string(config_.accumulate_grad_batches));
    }
    if (config_.warmup_rate < 0.0 || config_.warmup_rate > 1.0) {
      throw ConfigError("Trainer: warmup_rate must be in [0, 1], got " +
                        detail::format_float(config_.warmup_rate));
    }
    plan_ = derive_plan(init_params, deployer_->mesh().mp_size(), overrides);
    wrt_ = shapes_of(init_params);
    state_ = shard_params(init_params, plan_, deployer_->mesh(), deployer_->seed());
    train_rng_ = deployer_->stream("train");
    options_.worker_threads = config_.worker_threads;

    log_path_ = deployer_->workdir() + "/run.log";
    log_.open(log_path_, std::ios::trunc);
    if (!log_) throw ConfigError("Trainer: cannot open log file '" + log_path_ + "'");
  }

  const ShardingPlan& plan() const { return plan_; }
  const TrainState<Scalar>& state() const { return state_; }
  ParamTree<Scalar> params() const { return gather_params(state_, deployer_->mesh()); }

  Predictor<Scalar, Example, Output> predictor() const {
    return Predictor<Scalar, Example, Output>(*deployer_, spec_, config_.worker_threads);
  }

  /// Restores a snapshot saved by this configuration (same model and mesh).
  void load(const std::string& checkpoint_path) {
    LoadedCheckpoint<Scalar> loaded =
        load_checkpoint<Scalar>(checkpoint_path, plan_, deployer_->mesh());
    state_ = std::move(loaded.state);
    for (const auto& [name, stream] : loaded.rngs) {
      if (name == "train") train_rng_ = stream;
    }
  }

  /// Runs epochs up to n_epochs (an absolute target, so a loaded checkpoint
  /// resumes where it left off). Pass stop_after_epoch to pause earlier; the
  /// learning-rate schedule still spans the full n_epochs horizon, so a later
  /// fit() continues the exact same trajectory.
  TrainResult fit(const Batch& train_examples, const Batch& eval_examples,
                  int stop_after_epoch = -1) {
    if (config_.n_epochs < 1) {
      throw ConfigError("Trainer: n_epochs must be positive, got " +
                        std::to_string(config_.n_epochs));
    }
    if (train_examples.empty()) throw ConfigError("Trainer: no training examples");
    const DeviceMesh& mesh = deployer_->mesh();
    const int dp = mesh.dp_size();
    const std::int64_t global_rows = config_.per_device_batch_size * dp;
    const std::int64_t rows_per_step = global_rows * config_.accumulate_grad_batches;
    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>(train_examples.size()) / rows_per_step;
    if (steps_per_epoch == 0) {
      throw ConfigError("Trainer: " + std::to_string(train_examples.size()) +
                        " examples is fewer than one optimizer step of " +
                        std::to_string(rows_per_step));
    }
    const std::int64_t total_steps = steps_per_epoch * config_.n_epochs;
    const auto warmup_steps =
        static_cast<std::int64_t>(config_.warmup_rate * static_cast<double>(total_steps));
    const int first_epoch = static_cast<int>(static_cast<std::int64_t>(state_.step) /
                                             steps_per_epoch);

    const int last_epoch = stop_after_epoch < 0
                               ? config_.n_epochs
                               : std::min(stop_after_epoch, config_.n_epochs);

    TrainResult result;
    result.log_path = log_path_;
    RngStream shuffle_base = deployer_->stream("data-shuffle");

    for (int epoch = first_epoch; epoch < last_epoch; ++epoch) {
      const std::vector<std::size_t> perm =
          shuffle_base.child(static_cast<std::uint64_t>(epoch))
              .permutation(train_examples.size());

      for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
        DeviceGrads<Scalar> acc = zero_grads_like(state_);
        double loss_sum = 0.0;
        for (int micro = 0; micro < config_.accumulate_grad_batches; ++micro) {
          const std::int64_t offset = s * rows_per_step + micro * global_rows;
          Batch batch;
          batch.reserve(static_cast<std::size_t>(global_rows));
          for (std::int64_t i = 0; i < global_rows; ++i) {
            batch.push_back(train_examples[perm[static_cast<std::size_t>(offset + i)]]);
          }
          InputMap<Scalar> global = spec_.collate_fn(batch);
          const std::int64_t rows = detail::batch_rows(global, "Trainer");
          if (rows != global_rows) {
            throw ShapeError("Trainer: collate_fn returned " + std::to_string(rows) +
                             " rows for a batch of " + std::to_string(global_rows) +
                             " examples");
          }
          for (int r = 0; r < dp; ++r) {
            const InputMap<Scalar> replica =
                dp == 1 ? std::move(global) : slice_batch_inputs(global, dp, r);
            LossProgram& program = loss_program(replica);
            SpmdParamMap<Scalar> views = replica_param_views(state_, mesh, r);
            SpmdLossAndGrads<Scalar> micro_result;
            try {
              micro_result = spmd_forward_backward(program.graph, program.loss_id,
                                                   program.grad_nodes, replica, views, mesh,
                                                   mesh.mp_group(r), &deployer_->comm_report(),
                                                   options_);
            } catch (const NonFiniteError& e) {
              throw NonFiniteError("Trainer: aborting at step " +
                                   std::to_string(state_.step + 1) + ": " + e.what());
            }
            loss_sum += static_cast<double>(micro_result.loss);
            add_replica_grads(acc, state_, mesh, r, micro_result.grads);
            if (dp == 1) break;
          }
        }
        const double loss =
            loss_sum / static_cast<double>(dp * config_.accumulate_grad_batches);
        if (config_.accumulate_grad_batches > 1) {
          scale_grads(acc, 1.0 / config_.accumulate_grad_batches);
        }
        dp_sync_grads(acc, mesh, &deployer_->comm_report());

        const std::uint64_t step_index = state_.step;
        const double lr = scheduled_lr(static_cast<std::int64_t>(step_index), total_steps,
                                       warmup_steps, config_.optimizer.lr);
        AdamWConfig step_config = config_.optimizer;
        step_config.lr = lr;
        try {
          adamw_step(state_, acc, step_config);
        } catch (const NonFiniteError& e) {
          throw NonFiniteError("Trainer: aborting at step " + std::to_string(step_index + 1) +
                               ": " + e.what());
        }

        log_ << "step=" << step_index << " loss=" << detail::format_float(loss)
             << " lr=" << detail::format_float(lr) << "\n";
        log_.flush();
        result.step_losses.push_back(loss);
        result.step_lrs.push_back(lr);
      }

      finish_epoch(epoch, eval_examples, result);
    }
    return result;
  }

 private:
  struct LossProgram {
    Graph<Scalar> graph;
    int loss_id = -1;
    std::vector<std::pair<std::string, int>> grad_nodes;
    ShapeMap input_shapes;
  };

  LossProgram& loss_program(const InputMap<Scalar>& inputs) {
    const std::int64_t rows = detail::batch_rows(inputs, "Trainer");
    ShapeMap shapes = detail::input_shapes_sorted(inputs);
    auto it = cache_.find(rows);
    if (it != cache_.end()) {
      if (it->second.input_shapes != shapes) {
        throw ConfigError("Trainer: collate_fn output shapes drifted for batches of " +
                          std::to_string(rows) + " rows");
      }
      return it->second;
    }
    GraphBuilder<Scalar> b;
    Val<Scalar> loss = spec_.loss_fn(b, shapes);
    LossProgram program;
    program.grad_nodes = grad(b, loss, wrt_);
    program.loss_id = loss.id;
    program.graph = b.take();
    program.input_shapes = std::move(shapes);
    return cache_.emplace(rows, std::move(program)).first->second;
  }

  /// Mean eval loss over every example: full batches at the eval batch size,
  /// then one naturally smaller batch for the remainder so padded rows never
  /// bias the mean.
  double eval_loss(const Batch& eval_examples) {
    const DeviceMesh& mesh = deployer_->mesh();
    const std::int64_t batch_size = config_.eval_per_device_batch_size > 0
                                        ? config_.eval_per_device_batch_size
                                        : config_.per_device_batch_size;
    const std::int64_t n = static_cast<std::int64_t>(eval_examples.size());
    double weighted_sum = 0.0;
    for (std::int64_t start = 0; start < n; start += batch_size) {
      const std::int64_t count = std::min(batch_size, n - start);
      Batch batch(eval_examples.begin() + start, eval_examples.begin() + start + count);
      InputMap<Scalar> inputs = spec_.collate_fn(batch);
      LossProgram& program = loss_program(inputs);
      SpmdInterpreter<Scalar> interp(mesh, mesh.mp_group(0), &deployer_->comm_report(),
                                     options_);
      SpmdParamMap<Scalar> views = replica_param_views(state_, mesh, 0);
      std::vector<ShardedTensor<Scalar>> values =
          interp.run(program.graph, inputs, views, {program.loss_id});
      interp.to_replicated(values[0]);
      weighted_sum += static_cast<double>(values[0].shards[0].item()) *
                      static_cast<double>(count);
    }
    return weighted_sum / static_cast<double>(n);
  }

  void finish_epoch(int epoch, const Batch& eval_examples, TrainResult& result) {
    EpochMetrics epoch_metrics;
    epoch_metrics.epoch = epoch;
    if (!eval_examples.empty()) {
      epoch_metrics.metrics.emplace_back("loss", eval_loss(eval_examples));
      if (spec_.metric_fn && spec_.pred_fn) {
        Predictor<Scalar, Example, Output> pred = predictor();
        const std::int64_t batch_size = config_.eval_per_device_batch_size > 0
                                            ? config_.eval_per_device_batch_size
                                            : config_.per_device_batch_size;
        std::vector<Output> outputs = pred.predict(state_, eval_examples, batch_size);
        for (auto& [name, value] : spec_.metric_fn(eval_examples, outputs)) {
          epoch_metrics.metrics.emplace_back(name, value);
        }
      }
      log_ << "epoch=" << epoch;
      for (const auto& [name, value] : epoch_metrics.metrics) {
        log_ << " " << name << "=" << detail::format_float(value);
      }
      log_ << "\n";
      log_.flush();
      result.eval_history.push_back(epoch_metrics);
    }

    const RngSnapshot rngs = {{"train", train_rng_}};
    const std::string last_path = deployer_->workdir() + "/last.ckpt";
    save_checkpoint(last_path, state_, deployer_->mesh(), rngs);
    result.checkpoints.push_back(last_path);

    for (const std::string& metric : config_.save_argmax_ckpt_by_metrics) {
      const auto found =
          std::find_if(epoch_metrics.metrics.begin(), epoch_metrics.metrics.end(),
                       [&](const auto& kv) { return kv.first == metric; });
      if (found == epoch_metrics.metrics.end()) {
        throw ConfigError("Trainer: metric '" + metric +
                          "' is tracked for checkpoints but was not produced this epoch");
      }
      const bool lower_is_better =
          std::find(config_.lower_is_better_metrics.begin(),
                    config_.lower_is_better_metrics.end(),
                    metric) != config_.lower_is_better_metrics.end();
      const auto best = best_.find(metric);
      const bool improved =
          best == best_.end() ||
          (lower_is_better ? found->second < best->second : found->second > best->second);
      if (improved) {
        best_[metric] = found->second;
        const std::string path = deployer_->workdir() + "/best_" + metric + ".ckpt";
        save_checkpoint(path, state_, deployer_->mesh(), rngs);
        result.checkpoints.push_back(path);
      }
    }
  }

  Deployer<Scalar>* deployer_;
  Spec spec_;
  RunConfig config_;
  ShardingPlan plan_;
  ShapeMap wrt_;
  TrainState<Scalar> state_;
  RngStream train_rng_;
  SpmdOptions options_;
  std::map<std::int64_t, LossProgram> cache_;
  std::map<std::string, double> best_;
  std::string log_path_;
  std::ofstream log_;
};

}  // namespace shardweave
