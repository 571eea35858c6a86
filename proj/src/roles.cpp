#include "shardweave/roles.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_map>
#include <unordered_set>

#include "shardweave/errors.hpp"

namespace shardweave {

namespace {

std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> segments;
  std::string current;
  for (char c : path) {
    if (c == '/') {
      segments.push_back(current);
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  segments.push_back(current);
  return segments;
}

const std::unordered_set<std::string> kAttentionScopes = {
    "attn", "attention", "self_attn", "self_attention", "mha", "cross_attn", "cross_attention"};
const std::unordered_set<std::string> kQkvSegments = {"q",  "k",  "v",  "query",  "key",   "value",
                                                     "qkv", "wq", "wk", "wv",    "q_proj", "k_proj",
                                                     "v_proj"};
const std::unordered_set<std::string> kOutSegments = {"o", "out", "out_proj", "output", "o_proj",
                                                      "wo"};
const std::unordered_set<std::string> kNormLeafSegments = {"scale", "gamma", "weight", "g"};

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

bool is_fully_connected_segment(const std::string& segment) {
  return segment == "mlp" || segment == "ffn" || starts_with(segment, "fc") ||
         starts_with(segment, "dense");
}

bool is_norm_scoped(const std::vector<std::string>& segments) {
  for (const auto& seg : segments) {
    if (starts_with(seg, "ln") || seg.find("norm") != std::string::npos) return true;
  }
  return false;
}

ParamRole heuristic_role(const std::string& path, const Shape& shape, bool* matched) {
  *matched = true;
  const std::vector<std::string> segments = split_path(lower(path));
  const std::string& leaf = segments.back();
  const std::size_t rank = shape.size();

  if (rank < 2) {
    if (leaf.find("bias") != std::string::npos || leaf == "beta" || leaf == "b") {
      return ParamRole::kBias;
    }
    if (kNormLeafSegments.count(leaf) > 0 || is_norm_scoped(segments)) {
      return ParamRole::kNorm;
    }
    return ParamRole::kBias;
  }

  for (const auto& seg : segments) {
    if (seg.find("embed") != std::string::npos) return ParamRole::kEmbedding;
  }

  bool in_attention = false;
  for (const auto& seg : segments) {
    if (kAttentionScopes.count(seg) > 0) {
      in_attention = true;
      break;
    }
  }
  if (in_attention) {
    // Innermost naming decides, so scan from the leaf outwards.
    for (auto it = segments.rbegin(); it != segments.rend(); ++it) {
      if (kQkvSegments.count(*it) > 0) return ParamRole::kAttentionQKV;
      if (kOutSegments.count(*it) > 0) return ParamRole::kAttentionOut;
    }
  }

  for (const auto& seg : segments) {
    if (is_fully_connected_segment(seg)) return ParamRole::kFullyConnected;
  }

  *matched = false;
  return ParamRole::kOther;
}

/// Parameters grouped for fully-connected numbering: the path minus its last
/// two segments (the layer and leaf names), so `block_0/mlp/fc1/kernel` and
/// `block_0/mlp/fc2/kernel` land in the same block.
std::string block_key(const std::string& path) {
  const std::vector<std::string> segments = split_path(path);
  if (segments.size() <= 2) return "";
  std::string key = segments[0];
  for (std::size_t i = 1; i + 2 < segments.size(); ++i) {
    key += '/';
    key += segments[i];
  }
  return key;
}

}  // namespace

std::string role_name(ParamRole role) {
  switch (role) {
    case ParamRole::kAttentionQKV: return "attention_qkv";
    case ParamRole::kAttentionOut: return "attention_out";
    case ParamRole::kFullyConnected: return "fully_connected";
    case ParamRole::kEmbedding: return "embedding";
    case ParamRole::kNorm: return "norm";
    case ParamRole::kBias: return "bias";
    case ParamRole::kOther: return "other";
  }
  return "other";
}

ParamRole parse_role(const std::string& text) {
  static const std::unordered_map<std::string, ParamRole> kNames = {
      {"attention_qkv", ParamRole::kAttentionQKV},
      {"attention_out", ParamRole::kAttentionOut},
      {"fully_connected", ParamRole::kFullyConnected},
      {"embedding", ParamRole::kEmbedding},
      {"norm", ParamRole::kNorm},
      {"bias", ParamRole::kBias},
      {"other", ParamRole::kOther},
  };
  const auto it = kNames.find(lower(text));
  if (it == kNames.end()) {
    throw ConfigError("parse_role: unknown role '" + text + "'");
  }
  return it->second;
}

RoleInference infer_roles(const ShapeMap& shapes, const std::vector<RoleOverride>& overrides) {
  RoleInference out;
  out.roles.reserve(shapes.size());

  for (const auto& [name, shape] : shapes) {
    const std::string path = lower(name);

    const RoleOverride* best = nullptr;
    for (const auto& ov : overrides) {
      if (path.find(lower(ov.pattern)) == std::string::npos) continue;
      if (best == nullptr || ov.pattern.size() > best->pattern.size()) {
        best = &ov;
      } else if (ov.pattern.size() == best->pattern.size() && ov.role != best->role) {
        throw ConfigError("infer_roles: overrides '" + best->pattern + "' and '" + ov.pattern +
                          "' conflict for parameter '" + name + "'");
      }
    }

    RoleAssignment assignment;
    if (best != nullptr) {
      assignment.role = best->role;
    } else {
      bool matched = false;
      assignment.role = heuristic_role(name, shape, &matched);
      if (!matched && shape.size() >= 2) {
        out.warnings.push_back("parameter '" + name + "' matched no role; treating as other");
      }
    }
    out.roles.emplace_back(name, assignment);
  }

  // Number fully-connected kernels by order of appearance within their block.
  std::unordered_map<std::string, int> next_index;
  for (auto& [name, assignment] : out.roles) {
    if (assignment.role == ParamRole::kFullyConnected) {
      assignment.sequence_index = next_index[block_key(lower(name))]++;
    }
  }
  return out;
}

}  // namespace shardweave
