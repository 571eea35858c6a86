#pragma once

#include <string>
#include <vector>

#include "shardweave/params.hpp"
#include "shardweave/partition.hpp"
#include "shardweave/roles.hpp"

namespace shardweave {

struct PlanEntry {
  std::string name;
  Partition partition;
};

/// How each parameter is laid out across a model-parallel group of
/// `n_shards` devices. Entries keep the parameter tree's order.
struct ShardingPlan {
  int n_shards = 1;
  std::vector<PlanEntry> entries;
  std::vector<std::string> warnings;

  const Partition* find(const std::string& name) const;
  /// Throws ConfigError when the plan has no entry for `name`.
  const Partition& at(const std::string& name) const;
};

/// Applies the sharding rules to assigned roles: attention QKV kernels split
/// along dim 0 and the output projection along dim 1; fully-connected
/// kernels alternate 0, 1, 0, ... by block position; everything else is
/// replicated. A split whose dim is not divisible by n_shards degrades to
/// replicated with a warning. Throws ConfigError when n_shards < 1 or when
/// no kernel is wide enough to split n_shards ways.
ShardingPlan derive_plan(const RoleMap& roles, const ShapeMap& shapes, int n_shards);

/// Convenience wrapper: infers roles first and folds inference warnings into
/// the plan's.
template <typename Scalar>
ShardingPlan derive_plan(const ParamTree<Scalar>& params, int n_shards,
                         const std::vector<RoleOverride>& overrides = {}) {
  RoleInference inference = infer_roles(params, overrides);
  ShardingPlan plan = derive_plan(inference.roles, shapes_of(params), n_shards);
  plan.warnings.insert(plan.warnings.begin(), inference.warnings.begin(),
                       inference.warnings.end());
  return plan;
}

/// Checks a plan against the shapes it will be applied to and against the
/// sharding-rule invariants (roles re-inferred with default heuristics).
/// Returns one message per violation; empty means valid.
std::vector<std::string> validate_plan(const ShardingPlan& plan, const ShapeMap& shapes);

/// One line per parameter: `name<TAB>replicated|split:<dim>`.
std::string serialize_plan(const ShardingPlan& plan);

/// Parses serialize_plan output. Throws ConfigError (with the line number)
/// on malformed lines.
ShardingPlan parse_plan(const std::string& text, int n_shards);

}  // namespace shardweave
