#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "shardweave/eval.hpp"
#include "shardweave/graph.hpp"
#include "shardweave/params.hpp"

namespace shardweave::testing {

/// Central-difference check of every gradient entry against the evaluator.
/// Returns the worst relative error across all params and elements, with the
/// denominator floored at 1 so tiny gradients compare absolutely.
inline double fd_max_rel_error(const Graph<double>& graph, const InputMap<double>& inputs,
                               const ParamTree<double>& params, int loss_id,
                               const std::vector<std::pair<std::string, int>>& grads) {
  EvalOptions opts;
  std::vector<int> wanted;
  wanted.reserve(grads.size());
  for (const auto& [name, id] : grads) wanted.push_back(id);
  const std::vector<Tensor<double>> analytic = evaluate(graph, inputs, params, wanted, opts);

  double worst = 0.0;
  for (std::size_t g = 0; g < grads.size(); ++g) {
    const std::string& name = grads[g].first;
    const Tensor<double>& base = params.at(name);
    for (std::int64_t i = 0; i < base.numel(); ++i) {
      const double theta = base[i];
      const double h = 1e-6 * std::max(1.0, std::abs(theta));

      ParamTree<double> bumped = params;
      Tensor<double> t = base;
      t[i] = theta + h;
      bumped.set(name, t);
      const double up = evaluate_one(graph, inputs, bumped, loss_id, opts).item();
      t[i] = theta - h;
      bumped.set(name, t);
      const double down = evaluate_one(graph, inputs, bumped, loss_id, opts).item();

      const double fd = (up - down) / (2.0 * h);
      const double an = analytic[g][i];
      const double rel =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace shardweave::testing
