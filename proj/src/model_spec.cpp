#include "shardweave/model_spec.hpp"

#include <fstream>
#include <sstream>
#include <unordered_set>

#include "shardweave/errors.hpp"

namespace shardweave {

namespace {

std::string trim(const std::string& s) {
  std::size_t begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  std::size_t end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::int64_t parse_int(const std::string& value, const std::string& key, int line_no) {
  std::size_t consumed = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(value, &consumed);
  } catch (const std::exception&) {
    consumed = 0;
  }
  if (consumed != value.size() || value.empty()) {
    throw ConfigError("model spec: line " + std::to_string(line_no) + ": '" + key +
                      "' needs an integer, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& value, const std::string& key, int line_no) {
  if (value == "true" || value == "yes" || value == "1") return true;
  if (value == "false" || value == "no" || value == "0") return false;
  throw ConfigError("model spec: line " + std::to_string(line_no) + ": '" + key +
                    "' needs true or false, got '" + value + "'");
}

}  // namespace

ModelSpec parse_model_spec(const std::string& text) {
  ModelSpec spec;
  std::unordered_set<std::string> seen;
  std::istringstream lines(text);
  std::string raw;
  int line_no = 0;

  while (std::getline(lines, raw)) {
    ++line_no;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;

    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("model spec: line " + std::to_string(line_no) +
                        ": expected `key = value`, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("model spec: line " + std::to_string(line_no) +
                        ": expected `key = value`, got '" + line + "'");
    }

    if (key.rfind("role ", 0) == 0) {
      const std::string pattern = trim(key.substr(5));
      if (pattern.empty()) {
        throw ConfigError("model spec: line " + std::to_string(line_no) +
                          ": role override needs a pattern");
      }
      spec.overrides.push_back({pattern, parse_role(value)});
      continue;
    }

    if (!seen.insert(key).second) {
      throw ConfigError("model spec: line " + std::to_string(line_no) + ": duplicate key '" +
                        key + "'");
    }
    if (key == "vocab_size") {
      spec.vocab_size = parse_int(value, key, line_no);
    } else if (key == "n_layers") {
      spec.n_layers = static_cast<int>(parse_int(value, key, line_no));
    } else if (key == "d_model") {
      spec.d_model = parse_int(value, key, line_no);
    } else if (key == "n_heads") {
      spec.n_heads = static_cast<int>(parse_int(value, key, line_no));
    } else if (key == "d_ff") {
      spec.d_ff = parse_int(value, key, line_no);
    } else if (key == "max_seq_len") {
      spec.max_seq_len = parse_int(value, key, line_no);
    } else if (key == "tie_embeddings") {
      spec.tie_embeddings = parse_bool(value, key, line_no);
    } else {
      throw ConfigError("model spec: line " + std::to_string(line_no) + ": unknown key '" + key +
                        "'");
    }
  }

  for (const char* required :
       {"vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_seq_len"}) {
    if (seen.find(required) == seen.end()) {
      throw ConfigError(std::string("model spec: missing required key '") + required + "'");
    }
  }
  if (spec.vocab_size < 1 || spec.n_layers < 1 || spec.d_model < 1 || spec.n_heads < 1 ||
      spec.d_ff < 1 || spec.max_seq_len < 1) {
    throw ConfigError("model spec: all dimensions must be positive");
  }
  if (spec.d_model % spec.n_heads != 0) {
    throw ConfigError("model spec: d_model " + std::to_string(spec.d_model) +
                      " is not divisible by n_heads " + std::to_string(spec.n_heads));
  }
  return spec;
}

ModelSpec read_model_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("model spec: cannot open '" + path + "'");
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_model_spec(buffer.str());
}

}  // namespace shardweave
