#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shardweave/roles.hpp"

namespace shardweave {

/// Architecture of a decoder-only transformer, as read from a line-oriented
/// `key = value` file. Role override lines (`role <pattern> = <role-name>`)
/// force a role onto matching parameters during plan derivation.
struct ModelSpec {
  std::int64_t vocab_size = 0;
  int n_layers = 0;
  std::int64_t d_model = 0;
  int n_heads = 0;
  std::int64_t d_ff = 0;
  std::int64_t max_seq_len = 0;
  bool tie_embeddings = false;
  std::vector<RoleOverride> overrides;
};

/// Parses and validates the `key = value` text form. `#` starts a comment;
/// blank lines are ignored. Required keys: vocab_size, n_layers, d_model,
/// n_heads, d_ff, max_seq_len. Throws ConfigError with the line number on
/// malformed or unknown lines, and on invalid dimensions (everything
/// positive, d_model divisible by n_heads).
ModelSpec parse_model_spec(const std::string& text);

/// Reads and parses a model spec file. Throws ConfigError when the file
/// cannot be opened.
ModelSpec read_model_spec(const std::string& path);

}  // namespace shardweave
