#include "shardweave/plan.hpp"

#include <sstream>
#include <unordered_map>

#include "shardweave/errors.hpp"

namespace shardweave {

namespace {

/// Dim the rules want to split a parameter along, or -1 for replicated.
std::int64_t intended_split_dim(const RoleAssignment& assignment) {
  switch (assignment.role) {
    case ParamRole::kAttentionQKV: return 0;
    case ParamRole::kAttentionOut: return 1;
    case ParamRole::kFullyConnected: return assignment.sequence_index % 2 == 0 ? 0 : 1;
    default: return -1;
  }
}

}  // namespace

const Partition* ShardingPlan::find(const std::string& name) const {
  for (const auto& entry : entries) {
    if (entry.name == name) return &entry.partition;
  }
  return nullptr;
}

const Partition& ShardingPlan::at(const std::string& name) const {
  const Partition* p = find(name);
  if (p == nullptr) {
    throw ConfigError("ShardingPlan: no entry for parameter '" + name + "'");
  }
  return *p;
}

ShardingPlan derive_plan(const RoleMap& roles, const ShapeMap& shapes, int n_shards) {
  if (n_shards < 1) {
    throw ConfigError("derive_plan: n_shards must be positive, got " + std::to_string(n_shards));
  }
  std::unordered_map<std::string, RoleAssignment> role_of;
  role_of.reserve(roles.size());
  for (const auto& [name, assignment] : roles) role_of[name] = assignment;

  if (n_shards > 1) {
    bool any_splittable = false;
    for (const auto& [name, shape] : shapes) {
      const auto it = role_of.find(name);
      if (it == role_of.end()) continue;
      const std::int64_t dim = intended_split_dim(it->second);
      if (dim < 0 || static_cast<std::size_t>(dim) >= shape.size()) continue;
      if (shape[static_cast<std::size_t>(dim)] >= n_shards) {
        any_splittable = true;
        break;
      }
    }
    if (!any_splittable) {
      throw ConfigError("derive_plan: model cannot be split this many ways (n_shards=" +
                        std::to_string(n_shards) + ")");
    }
  }

  ShardingPlan plan;
  plan.n_shards = n_shards;
  plan.entries.reserve(shapes.size());
  for (const auto& [name, shape] : shapes) {
    const auto it = role_of.find(name);
    if (it == role_of.end()) {
      throw ConfigError("derive_plan: no role assigned for parameter '" + name + "'");
    }
    const std::int64_t dim = intended_split_dim(it->second);
    Partition partition = Partition::replicated();
    if (dim >= 0) {
      if (static_cast<std::size_t>(dim) >= shape.size()) {
        plan.warnings.push_back("parameter '" + name + "': split dim " + std::to_string(dim) +
                                " out of range for " + shape_str(shape) + "; replicated instead");
      } else if (shape[static_cast<std::size_t>(dim)] % n_shards != 0) {
        plan.warnings.push_back("parameter '" + name + "': dim " + std::to_string(dim) + " size " +
                                std::to_string(shape[static_cast<std::size_t>(dim)]) +
                                " not divisible by " + std::to_string(n_shards) +
                                " shards; replicated instead");
      } else {
        partition = Partition::split(dim);
      }
    }
    plan.entries.push_back({name, partition});
  }
  return plan;
}

std::vector<std::string> validate_plan(const ShardingPlan& plan, const ShapeMap& shapes) {
  std::vector<std::string> violations;
  std::unordered_map<std::string, Shape> shape_of;
  shape_of.reserve(shapes.size());
  for (const auto& [name, shape] : shapes) shape_of[name] = shape;

  for (const auto& entry : plan.entries) {
    const auto it = shape_of.find(entry.name);
    if (it == shape_of.end()) {
      violations.push_back("parameter '" + entry.name + "' not present in the shape map");
      continue;
    }
    if (!entry.partition.is_split()) continue;
    const Shape& shape = it->second;
    const std::int64_t dim = entry.partition.dim;
    if (dim < 0 || static_cast<std::size_t>(dim) >= shape.size()) {
      violations.push_back("parameter '" + entry.name + "': dim out of range (split:" +
                           std::to_string(dim) + " on " + shape_str(shape) + ")");
      continue;
    }
    if (shape[static_cast<std::size_t>(dim)] % plan.n_shards != 0) {
      violations.push_back("parameter '" + entry.name + "': dim " + std::to_string(dim) +
                           " size " + std::to_string(shape[static_cast<std::size_t>(dim)]) +
                           " not divisible by " + std::to_string(plan.n_shards) + " shards");
    }
  }

  const RoleInference inference = infer_roles(shapes);
  std::unordered_map<std::string, RoleAssignment> role_of;
  role_of.reserve(inference.roles.size());
  for (const auto& [name, assignment] : inference.roles) role_of[name] = assignment;

  // Previous fully-connected split per block, keyed by the entry before the
  // current one in sequence order.
  std::unordered_map<std::string, std::pair<int, Partition>> last_fc;

  for (const auto& entry : plan.entries) {
    const auto role_it = role_of.find(entry.name);
    if (role_it == role_of.end()) continue;
    const RoleAssignment& assignment = role_it->second;
    const auto shape_it = shape_of.find(entry.name);
    if (shape_it == shape_of.end()) continue;
    const Shape& shape = shape_it->second;

    if (assignment.role == ParamRole::kAttentionQKV && entry.partition.is_split() &&
        entry.partition.dim != 0) {
      violations.push_back("parameter '" + entry.name + "': attention qkv split along dim " +
                           std::to_string(entry.partition.dim) + ", expected dim 0");
    }
    if (assignment.role == ParamRole::kAttentionOut && entry.partition.is_split() &&
        entry.partition.dim != 1) {
      violations.push_back("parameter '" + entry.name + "': attention output split along dim " +
                           std::to_string(entry.partition.dim) + ", expected dim 1");
    }
    if (plan.n_shards > 1 && entry.partition.is_replicated() && shape.size() >= 2) {
      const std::int64_t dim = intended_split_dim(assignment);
      if ((assignment.role == ParamRole::kAttentionQKV ||
           assignment.role == ParamRole::kAttentionOut) &&
          shape[static_cast<std::size_t>(dim)] % plan.n_shards == 0) {
        violations.push_back("parameter '" + entry.name + "': replicated " +
                             role_name(assignment.role) + " although dim " + std::to_string(dim) +
                             " is divisible by " + std::to_string(plan.n_shards) + " shards");
      }
    }
    if (assignment.role == ParamRole::kFullyConnected && entry.partition.is_split()) {
      // Reconstruct the block key the same way role numbering does.
      std::string key = entry.name;
      int cuts = 0;
      for (auto i = static_cast<std::int64_t>(key.size()) - 1; i >= 0 && cuts < 2; --i) {
        if (key[static_cast<std::size_t>(i)] == '/') {
          ++cuts;
          if (cuts == 2) key.resize(static_cast<std::size_t>(i));
        }
      }
      if (cuts < 2) key.clear();
      const auto prev = last_fc.find(key);
      if (prev != last_fc.end() && prev->second.first == assignment.sequence_index - 1 &&
          prev->second.second == entry.partition) {
        violations.push_back("parameter '" + entry.name +
                             "': consecutive FC kernels share split dim " +
                             std::to_string(entry.partition.dim));
      }
      last_fc[key] = {assignment.sequence_index, entry.partition};
    }
  }
  return violations;
}

std::string serialize_plan(const ShardingPlan& plan) {
  std::string out;
  for (const auto& entry : plan.entries) {
    out += entry.name;
    out += '\t';
    if (entry.partition.is_split()) {
      out += "split:" + std::to_string(entry.partition.dim);
    } else {
      out += "replicated";
    }
    out += '\n';
  }
  return out;
}

ShardingPlan parse_plan(const std::string& text, int n_shards) {
  if (n_shards < 1) {
    throw ConfigError("parse_plan: n_shards must be positive, got " + std::to_string(n_shards));
  }
  ShardingPlan plan;
  plan.n_shards = n_shards;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw ConfigError("parse_plan: line " + std::to_string(line_no) +
                        ": expected `name<TAB>replicated|split:<dim>`");
    }
    const std::string name = line.substr(0, tab);
    const std::string spec = line.substr(tab + 1);
    Partition partition;
    if (spec == "replicated") {
      partition = Partition::replicated();
    } else if (spec.rfind("split:", 0) == 0) {
      const std::string dim_text = spec.substr(6);
      std::size_t used = 0;
      std::int64_t dim = -1;
      try {
        dim = std::stoll(dim_text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != dim_text.size() || dim < 0) {
        throw ConfigError("parse_plan: line " + std::to_string(line_no) + ": bad split dim '" +
                          dim_text + "'");
      }
      partition = Partition::split(dim);
    } else {
      throw ConfigError("parse_plan: line " + std::to_string(line_no) + ": unknown layout '" +
                        spec + "'");
    }
    plan.entries.push_back({name, partition});
  }
  return plan;
}

}  // namespace shardweave
