#pragma once

#include <string>
#include <utility>
#include <vector>

#include "shardweave/params.hpp"

namespace shardweave {

/// Structural role of one parameter inside a transformer-style tree.
enum class ParamRole : std::uint8_t {
  kAttentionQKV,
  kAttentionOut,
  kFullyConnected,
  kEmbedding,
  kNorm,
  kBias,
  kOther,
};

std::string role_name(ParamRole role);

/// Parses the snake_case form produced by role_name. Throws ConfigError on
/// unknown names.
ParamRole parse_role(const std::string& text);

/// Role plus, for fully-connected kernels, the 0-based dataflow position
/// within their block.
struct RoleAssignment {
  ParamRole role = ParamRole::kOther;
  int sequence_index = -1;
};

/// Forces a role onto every parameter whose path contains `pattern`
/// (case-insensitive). Longer patterns beat shorter ones; two equally long
/// matches with different roles are rejected.
struct RoleOverride {
  std::string pattern;
  ParamRole role;
};

using RoleMap = std::vector<std::pair<std::string, RoleAssignment>>;

struct RoleInference {
  RoleMap roles;
  std::vector<std::string> warnings;
};

/// Assigns a role to every parameter by name heuristics, override patterns
/// winning over heuristics. The heuristics work on '/'-separated path
/// segments: 1-D tensors are norms or biases; segments containing `embed`
/// mark embeddings; inside an attention scope (`attn`, `attention`, `mha`,
/// ...) the segments `q`/`k`/`v`/`query`/... mark QKV kernels and
/// `o`/`out`/`out_proj`/... the output projection; 2-D tensors under `mlp`,
/// `ffn`, `fc*`, or `dense*` are fully-connected, numbered in tree order
/// within their block. Anything 2-D left over becomes kOther with a warning.
RoleInference infer_roles(const ShapeMap& shapes, const std::vector<RoleOverride>& overrides = {});

template <typename Scalar>
RoleInference infer_roles(const ParamTree<Scalar>& params,
                          const std::vector<RoleOverride>& overrides = {}) {
  return infer_roles(shapes_of(params), overrides);
}

}  // namespace shardweave
