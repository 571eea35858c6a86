#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "shardweave/rng.hpp"
#include "shardweave/tensor.hpp"

namespace shardweave {

/// Ordered mapping from hierarchical parameter names (slash-separated paths)
/// to tensors. Insertion order is the tree order; sharding-plan derivation and
/// serialization both iterate in this order.
template <typename Scalar>
class ParamTree {
 public:
  void add(const std::string& name, Tensor<Scalar> value) {
    if (index_.count(name)) {
      throw ShapeError("param tree: duplicate parameter name '" + name + "'");
    }
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<Scalar>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ShapeError("param tree: unknown parameter '" + name + "'");
    }
    return entries_[it->second].second;
  }

  void set(const std::string& name, Tensor<Scalar> value) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ShapeError("param tree: unknown parameter '" + name + "'");
    }
    entries_[it->second].second = std::move(value);
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const std::vector<std::pair<std::string, Tensor<Scalar>>>& entries() const { return entries_; }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, value] : entries_) out.push_back(name);
    return out;
  }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& [name, value] : entries_) n += value.numel();
    return n;
  }

  bool bit_equal(const ParamTree& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].first != other.entries_[i].first) return false;
      if (!entries_[i].second.bit_equal(other.entries_[i].second)) return false;
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Tensor<Scalar>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Ordered name -> shape view of a tree, the input to plan derivation.
using ShapeMap = std::vector<std::pair<std::string, Shape>>;

template <typename Scalar>
ShapeMap shapes_of(const ParamTree<Scalar>& params) {
  ShapeMap out;
  out.reserve(params.size());
  for (const auto& [name, value] : params) out.emplace_back(name, value.shape());
  return out;
}

/// Normal(0, std) initialisation, deterministic per (stream, name).
template <typename Scalar>
Tensor<Scalar> init_normal(const RngStream& root, const std::string& name, Shape shape,
                           double stddev) {
  RngStream stream = root.child(name);
  Tensor<Scalar> t = Tensor<Scalar>::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<Scalar>(stream.next_normal() * stddev);
  }
  return t;
}

}  // namespace shardweave
