#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "shardweave/autodiff.hpp"
#include "shardweave/errors.hpp"
#include "shardweave/eval.hpp"
#include "shardweave/graph.hpp"
#include "shardweave/model.hpp"
#include "shardweave/model_spec.hpp"
#include "shardweave/pipeline.hpp"
#include "shardweave/rng.hpp"

namespace shardweave {

namespace detail {

inline const Shape& shape_for(const ShapeMap& shapes, const std::string& name) {
  for (const auto& [key, shape] : shapes) {
    if (key == name) return shape;
  }
  throw ConfigError("examples: input '" + name + "' missing from collated batch");
}

template <typename Scalar>
const Tensor<Scalar>& output_named(const std::vector<std::pair<std::string, Tensor<Scalar>>>& outs,
                                   const std::string& name) {
  for (const auto& [key, tensor] : outs) {
    if (key == name) return tensor;
  }
  throw ConfigError("examples: prediction output '" + name + "' missing");
}

}  // namespace detail

/// Short plain-text corpus for the character language model. Small enough to
/// embed, long enough that 32-character windows keep the model busy.
inline const std::string& char_corpus() {
  static const std::string text =
      "the tide comes in slowly over the flats, and the small boats lift one by "
      "one from the grey mud. by noon the channel is full, and the gulls drift "
      "out to the sand bar to wait. an old man walks the sea wall every morning, "
      "counting the steps from the lighthouse to the harbour gate. he says the "
      "wind keeps its own calendar, and that a careful ear can hear the season "
      "turn. in the afternoon the fishing boats come back, low in the water, and "
      "the market opens under the long roof. crates of silver fish pass from "
      "hand to hand, and the price is argued twice and settled once. when the "
      "rain arrives it comes from the west, over the hills, and the harbour "
      "turns the colour of slate. the boats rock at their moorings, and the "
      "ropes creak like old doors. children run along the pier to watch the "
      "waves break over the stones, and nobody calls them home until the light "
      "fails. at night the lighthouse sweeps the bay, and the town sleeps "
      "behind its shutters. the baker lights his ovens before dawn, and the "
      "smell of bread slips down the lanes to the water. so the days go round, "
      "tide and market, rain and bread, and the sea keeps the time for all of "
      "them.";
  return text;
}

/// One training example for the character model: a window of seq_len + 1
/// token ids, where position t predicts position t + 1.
struct CharWindow {
  std::vector<int> tokens;
};

/// Character language model on the embedded corpus. The alphabet is the
/// sorted set of distinct corpus characters; windows slide over the corpus
/// cyclically so any number of examples can be drawn.
template <typename Scalar>
struct CharLmExample {
  using Spec = PipelineSpec<Scalar, CharWindow, std::string>;

  std::string alphabet;
  ModelSpec model;
  std::int64_t seq_len = 32;

  CharLmExample() {
    const std::string& corpus = char_corpus();
    const std::set<char> distinct(corpus.begin(), corpus.end());
    alphabet.assign(distinct.begin(), distinct.end());
    model.vocab_size = static_cast<std::int64_t>(alphabet.size());
    model.n_layers = 2;
    model.d_model = 32;
    model.n_heads = 4;
    model.d_ff = 64;
    model.max_seq_len = seq_len;
  }

  int encode(char c) const {
    const auto pos = alphabet.find(c);
    if (pos == std::string::npos) {
      throw ConfigError(std::string("char-lm: character '") + c + "' is not in the alphabet");
    }
    return static_cast<int>(pos);
  }

  CharWindow window_at(std::size_t start) const {
    const std::string& corpus = char_corpus();
    CharWindow w;
    w.tokens.reserve(static_cast<std::size_t>(seq_len) + 1);
    for (std::int64_t t = 0; t <= seq_len; ++t) {
      w.tokens.push_back(encode(corpus[(start + static_cast<std::size_t>(t)) % corpus.size()]));
    }
    return w;
  }

  std::vector<CharWindow> train_windows(std::int64_t count) const {
    std::vector<CharWindow> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      out.push_back(window_at(static_cast<std::size_t>(i) * 17));
    }
    return out;
  }

  std::vector<CharWindow> eval_windows(std::int64_t count) const {
    std::vector<CharWindow> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      out.push_back(window_at(static_cast<std::size_t>(i) * 23 + 5));
    }
    return out;
  }

  Spec pipeline() const {
    const std::int64_t T = seq_len;
    const ModelSpec spec_model = model;
    const std::string spec_alphabet = alphabet;

    Spec spec;
    spec.collate_fn = [T](const std::vector<CharWindow>& batch) {
      const auto rows = static_cast<std::int64_t>(batch.size());
      Tensor<Scalar> tokens = Tensor<Scalar>::zeros({rows, T});
      Tensor<Scalar> targets = Tensor<Scalar>::zeros({rows, T});
      for (std::int64_t r = 0; r < rows; ++r) {
        const auto& w = batch[static_cast<std::size_t>(r)].tokens;
        if (static_cast<std::int64_t>(w.size()) != T + 1) {
          throw ShapeError("char-lm: window needs " + std::to_string(T + 1) + " tokens, got " +
                           std::to_string(w.size()));
        }
        for (std::int64_t t = 0; t < T; ++t) {
          tokens[r * T + t] = static_cast<Scalar>(w[static_cast<std::size_t>(t)]);
          targets[r * T + t] = static_cast<Scalar>(w[static_cast<std::size_t>(t) + 1]);
        }
      }
      InputMap<Scalar> inputs;
      inputs.emplace("tokens", std::move(tokens));
      inputs.emplace("targets", std::move(targets));
      inputs.emplace("weights", Tensor<Scalar>::full({rows, T}, Scalar(1)));
      return inputs;
    };
    spec.loss_fn = [spec_model](GraphBuilder<Scalar>& b, const ShapeMap& shapes) {
      const Shape& ts = detail::shape_for(shapes, "tokens");
      return transformer_loss(b, spec_model, ts[0], ts[1]);
    };
    spec.pred_fn = [spec_model](GraphBuilder<Scalar>& b, const ShapeMap& shapes) {
      const Shape& ts = detail::shape_for(shapes, "tokens");
      auto logits = transformer_logits(b, spec_model, ts[0], ts[1]);
      typename Spec::NamedVals outs;
      outs.emplace_back("next", argmax(logits));
      return outs;
    };
    spec.output_fn = [spec_alphabet](const typename Spec::NamedTensors& outs) {
      const Tensor<Scalar>& next = detail::output_named(outs, "next");
      std::string decoded;
      decoded.reserve(static_cast<std::size_t>(next.numel()));
      for (std::int64_t t = 0; t < next.numel(); ++t) {
        decoded.push_back(spec_alphabet[static_cast<std::size_t>(next[t])]);
      }
      return decoded;
    };
    spec.metric_fn = [spec_alphabet](const std::vector<CharWindow>& batch,
                                     const std::vector<std::string>& outputs) {
      std::int64_t correct = 0;
      std::int64_t total = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& w = batch[i].tokens;
        for (std::size_t t = 0; t + 1 < w.size(); ++t) {
          correct += spec_alphabet[static_cast<std::size_t>(w[t + 1])] == outputs[i][t] ? 1 : 0;
          ++total;
        }
      }
      typename Spec::Metrics metrics;
      metrics.emplace_back("acc", static_cast<double>(correct) / static_cast<double>(total));
      return metrics;
    };
    return spec;
  }
};

/// One copy-task example: a random symbol sequence the model must echo after
/// a separator.
struct CopyPair {
  std::vector<int> src;
};

/// Sequence-to-sequence copy task phrased as a prefix language model: the
/// input is `src SEP src`, and the loss only counts the positions that
/// predict the second copy.
template <typename Scalar>
struct CopyTaskExample {
  using Spec = PipelineSpec<Scalar, CopyPair, std::string>;

  int alphabet_size = 8;
  std::int64_t src_len = 8;
  ModelSpec model;

  CopyTaskExample() {
    model.vocab_size = alphabet_size + 1;
    model.n_layers = 2;
    model.d_model = 32;
    model.n_heads = 4;
    model.d_ff = 64;
    model.max_seq_len = 2 * src_len + 1;
  }

  int sep_token() const { return alphabet_size; }
  std::int64_t seq_len() const { return 2 * src_len + 1; }

  std::vector<CopyPair> sample_pairs(RngStream rng, std::int64_t count) const {
    std::vector<CopyPair> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      CopyPair pair;
      pair.src.reserve(static_cast<std::size_t>(src_len));
      for (std::int64_t t = 0; t < src_len; ++t) {
        pair.src.push_back(
            static_cast<int>(rng.next_below(static_cast<std::uint64_t>(alphabet_size))));
      }
      out.push_back(std::move(pair));
    }
    return out;
  }

  std::string decode(const std::vector<int>& symbols) const {
    std::string s;
    s.reserve(symbols.size());
    for (int id : symbols) s.push_back(static_cast<char>('a' + id));
    return s;
  }

  Spec pipeline() const {
    const std::int64_t S = src_len;
    const std::int64_t T = seq_len();
    const int sep = sep_token();
    const ModelSpec spec_model = model;

    Spec spec;
    spec.collate_fn = [S, T, sep](const std::vector<CopyPair>& batch) {
      const auto rows = static_cast<std::int64_t>(batch.size());
      Tensor<Scalar> tokens = Tensor<Scalar>::zeros({rows, T});
      Tensor<Scalar> targets = Tensor<Scalar>::zeros({rows, T});
      Tensor<Scalar> weights = Tensor<Scalar>::zeros({rows, T});
      for (std::int64_t r = 0; r < rows; ++r) {
        const auto& src = batch[static_cast<std::size_t>(r)].src;
        if (static_cast<std::int64_t>(src.size()) != S) {
          throw ShapeError("seq2seq-copy: source needs " + std::to_string(S) +
                           " symbols, got " + std::to_string(src.size()));
        }
        std::vector<int> seq;
        seq.reserve(static_cast<std::size_t>(T));
        seq.insert(seq.end(), src.begin(), src.end());
        seq.push_back(sep);
        seq.insert(seq.end(), src.begin(), src.end());
        for (std::int64_t t = 0; t < T; ++t) {
          tokens[r * T + t] = static_cast<Scalar>(seq[static_cast<std::size_t>(t)]);
          targets[r * T + t] =
              t + 1 < T ? static_cast<Scalar>(seq[static_cast<std::size_t>(t) + 1]) : Scalar(0);
          weights[r * T + t] = t >= S && t < 2 * S ? Scalar(1) : Scalar(0);
        }
      }
      InputMap<Scalar> inputs;
      inputs.emplace("tokens", std::move(tokens));
      inputs.emplace("targets", std::move(targets));
      inputs.emplace("weights", std::move(weights));
      return inputs;
    };
    spec.loss_fn = [spec_model](GraphBuilder<Scalar>& b, const ShapeMap& shapes) {
      const Shape& ts = detail::shape_for(shapes, "tokens");
      return transformer_loss(b, spec_model, ts[0], ts[1]);
    };
    spec.pred_fn = [spec_model](GraphBuilder<Scalar>& b, const ShapeMap& shapes) {
      const Shape& ts = detail::shape_for(shapes, "tokens");
      auto logits = transformer_logits(b, spec_model, ts[0], ts[1]);
      typename Spec::NamedVals outs;
      outs.emplace_back("next", argmax(logits));
      return outs;
    };
    spec.output_fn = [S](const typename Spec::NamedTensors& outs) {
      const Tensor<Scalar>& next = detail::output_named(outs, "next");
      std::string copied;
      copied.reserve(static_cast<std::size_t>(S));
      for (std::int64_t t = S; t < 2 * S; ++t) {
        copied.push_back(static_cast<char>('a' + static_cast<int>(next[t])));
      }
      return copied;
    };
    spec.metric_fn = [S](const std::vector<CopyPair>& batch,
                         const std::vector<std::string>& outputs) {
      std::int64_t correct = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::int64_t t = 0; t < S; ++t) {
          const char want = static_cast<char>('a' + batch[i].src[static_cast<std::size_t>(t)]);
          correct += outputs[i][static_cast<std::size_t>(t)] == want ? 1 : 0;
        }
      }
      typename Spec::Metrics metrics;
      metrics.emplace_back("copy_acc", static_cast<double>(correct) /
                                           static_cast<double>(batch.size() * static_cast<std::size_t>(S)));
      return metrics;
    };
    return spec;
  }
};

/// One meta-learning task: a sinusoid y = a sin(x + phi) with support points
/// to adapt on and query points to evaluate the adapted model.
struct SinusoidTask {
  double amplitude = 1.0;
  double phase = 0.0;
  std::vector<double> support_x, support_y;
  std::vector<double> query_x, query_y;
};

/// First-order model-agnostic meta-learning on sinusoid regression. The loss
/// traces one inner gradient step on the support set, freezes that gradient
/// with stop_gradient, and scores the adapted parameters on the query set.
/// Each example is one task, so per-task adaptation needs batch size 1;
/// meta-batching comes from data parallelism and gradient accumulation.
template <typename Scalar>
struct MamlSinusoidExample {
  using Spec = PipelineSpec<Scalar, SinusoidTask, std::vector<double>>;

  std::int64_t hidden = 40;
  std::int64_t k_support = 10;
  std::int64_t k_query = 10;
  double inner_lr = 0.01;

  ShapeMap param_shapes() const {
    return {{"net/fc1/kernel", {hidden, 1}}, {"net/fc1/bias", {hidden}},
            {"net/fc2/kernel", {hidden, hidden}}, {"net/fc2/bias", {hidden}},
            {"net/fc3/kernel", {1, hidden}}, {"net/fc3/bias", {1}}};
  }

  ParamTree<Scalar> init_params(RngStream rng) const {
    ParamTree<Scalar> tree;
    const double h_scale = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (const auto& [name, shape] : param_shapes()) {
      if (name.find("bias") != std::string::npos) {
        tree.add(name, Tensor<Scalar>::zeros(shape));
        continue;
      }
      const double scale = shape[1] == 1 ? 1.0 : h_scale;
      Tensor<Scalar> t = Tensor<Scalar>::zeros(shape);
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<Scalar>(rng.next_normal() * scale);
      }
      tree.add(name, std::move(t));
    }
    return tree;
  }

  std::vector<SinusoidTask> sample_tasks(RngStream rng, std::int64_t count) const {
    std::vector<SinusoidTask> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      SinusoidTask task;
      task.amplitude = 0.1 + 4.9 * rng.next_uniform();
      task.phase = 3.141592653589793 * rng.next_uniform();
      auto draw = [&](std::vector<double>& xs, std::vector<double>& ys, std::int64_t k) {
        for (std::int64_t j = 0; j < k; ++j) {
          const double x = -5.0 + 10.0 * rng.next_uniform();
          xs.push_back(x);
          ys.push_back(task.amplitude * std::sin(x + task.phase));
        }
      };
      draw(task.support_x, task.support_y, k_support);
      draw(task.query_x, task.query_y, k_query);
      out.push_back(std::move(task));
    }
    return out;
  }

  Spec pipeline() const {
    const double alpha = inner_lr;
    const ShapeMap wrt = param_shapes();

    const auto declare = [wrt](GraphBuilder<Scalar>& b) {
      std::array<Val<Scalar>, 6> theta;
      for (std::size_t i = 0; i < wrt.size(); ++i) {
        theta[i] = b.param(wrt[i].first, wrt[i].second);
      }
      return theta;
    };
    const auto forward = [](Val<Scalar> x, const std::array<Val<Scalar>, 6>& p) {
      auto h1 = gelu(linear(x, p[0], p[1]));
      auto h2 = gelu(linear(h1, p[2], p[3]));
      return linear(h2, p[4], p[5]);
    };
    const auto mse = [](Val<Scalar> got, Val<Scalar> want) {
      auto err = sub(got, want);
      return reduce_mean_all(mul(err, err));
    };
    const auto adapt = [wrt, alpha, declare, forward, mse](GraphBuilder<Scalar>& b,
                                                           const ShapeMap& shapes) {
      const Shape& sx = detail::shape_for(shapes, "support_x");
      auto theta = declare(b);
      auto support_x = b.input("support_x", sx);
      auto support_y = b.input("support_y", sx);
      auto inner = mse(forward(support_x, theta), support_y);
      auto grads = grad(b, inner, wrt);
      std::array<Val<Scalar>, 6> adapted;
      for (std::size_t i = 0; i < grads.size(); ++i) {
        auto frozen = stop_gradient(Val<Scalar>{&b, grads[i].second});
        adapted[i] = sub(theta[i], mul_scalar(frozen, alpha));
      }
      return std::make_pair(theta, adapted);
    };

    Spec spec;
    spec.collate_fn = [](const std::vector<SinusoidTask>& batch) {
      const auto rows = static_cast<std::int64_t>(batch.size());
      const auto pack = [rows](auto accessor, std::int64_t k) {
        Tensor<Scalar> t = Tensor<Scalar>::zeros({rows, k, 1});
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::vector<double>& vals = accessor(static_cast<std::size_t>(r));
          if (static_cast<std::int64_t>(vals.size()) != k) {
            throw ShapeError("maml-sinusoid: task needs " + std::to_string(k) +
                             " points per set, got " + std::to_string(vals.size()));
          }
          for (std::int64_t j = 0; j < k; ++j) {
            t[r * k + j] = static_cast<Scalar>(vals[static_cast<std::size_t>(j)]);
          }
        }
        return t;
      };
      const std::int64_t ks = static_cast<std::int64_t>(batch.front().support_x.size());
      const std::int64_t kq = static_cast<std::int64_t>(batch.front().query_x.size());
      InputMap<Scalar> inputs;
      inputs.emplace("support_x",
                     pack([&](std::size_t r) -> const std::vector<double>& {
                       return batch[r].support_x;
                     }, ks));
      inputs.emplace("support_y",
                     pack([&](std::size_t r) -> const std::vector<double>& {
                       return batch[r].support_y;
                     }, ks));
      inputs.emplace("query_x",
                     pack([&](std::size_t r) -> const std::vector<double>& {
                       return batch[r].query_x;
                     }, kq));
      inputs.emplace("query_y",
                     pack([&](std::size_t r) -> const std::vector<double>& {
                       return batch[r].query_y;
                     }, kq));
      return inputs;
    };
    spec.loss_fn = [adapt, forward, mse](GraphBuilder<Scalar>& b, const ShapeMap& shapes) {
      auto [theta, adapted] = adapt(b, shapes);
      (void)theta;
      const Shape& qx = detail::shape_for(shapes, "query_x");
      auto query_x = b.input("query_x", qx);
      auto query_y = b.input("query_y", qx);
      return mse(forward(query_x, adapted), query_y);
    };
    spec.pred_fn = [adapt, forward](GraphBuilder<Scalar>& b, const ShapeMap& shapes) {
      auto [theta, adapted] = adapt(b, shapes);
      const Shape& qx = detail::shape_for(shapes, "query_x");
      auto query_x = b.input("query_x", qx);
      typename Spec::NamedVals outs;
      outs.emplace_back("pre", forward(query_x, theta));
      outs.emplace_back("post", forward(query_x, adapted));
      return outs;
    };
    spec.output_fn = [](const typename Spec::NamedTensors& outs) {
      const Tensor<Scalar>& pre = detail::output_named(outs, "pre");
      const Tensor<Scalar>& post = detail::output_named(outs, "post");
      std::vector<double> flat;
      flat.reserve(static_cast<std::size_t>(pre.numel() + post.numel()));
      for (std::int64_t i = 0; i < pre.numel(); ++i) flat.push_back(static_cast<double>(pre[i]));
      for (std::int64_t i = 0; i < post.numel(); ++i) flat.push_back(static_cast<double>(post[i]));
      return flat;
    };
    spec.metric_fn = [](const std::vector<SinusoidTask>& batch,
                        const std::vector<std::vector<double>>& outputs) {
      double pre_sum = 0.0;
      double post_sum = 0.0;
      std::int64_t improved = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::vector<double>& qy = batch[i].query_y;
        const std::size_t kq = qy.size();
        double pre_mse = 0.0;
        double post_mse = 0.0;
        for (std::size_t j = 0; j < kq; ++j) {
          const double pre_err = outputs[i][j] - qy[j];
          const double post_err = outputs[i][kq + j] - qy[j];
          pre_mse += pre_err * pre_err;
          post_mse += post_err * post_err;
        }
        pre_mse /= static_cast<double>(kq);
        post_mse /= static_cast<double>(kq);
        pre_sum += pre_mse;
        post_sum += post_mse;
        improved += post_mse < pre_mse ? 1 : 0;
      }
      const auto n = static_cast<double>(batch.size());
      typename Spec::Metrics metrics;
      metrics.emplace_back("improved", static_cast<double>(improved) / n);
      metrics.emplace_back("pre_mse", pre_sum / n);
      metrics.emplace_back("post_mse", post_sum / n);
      return metrics;
    };
    return spec;
  }
};

/// Runs the first-order adaptation machinery on the quadratic toy problem
/// loss(theta) = theta^2 and returns the adapted parameter, which should be
/// theta - alpha * 2 * theta.
inline double maml_quadratic_adapted_theta(double theta0, double alpha) {
  GraphBuilder<double> b;
  auto theta = b.param("theta", {1});
  auto inner = reduce_sum_all(mul(theta, theta));
  auto grads = grad(b, inner, {{"theta", {1}}});
  auto frozen = stop_gradient(Val<double>{&b, grads[0].second});
  auto adapted = sub(theta, mul_scalar(frozen, alpha));

  ParamTree<double> params;
  params.add("theta", Tensor<double>::full({1}, theta0));
  return evaluate_one(b.graph(), {}, params, adapted.id)[0];
}

}  // namespace shardweave
