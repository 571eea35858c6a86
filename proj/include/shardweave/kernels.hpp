#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "shardweave/tensor.hpp"

namespace shardweave::kernels {

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

/// Rounds a stored scalar back to the integer it encodes. Ids and labels
/// travel through the same tensors as real data.
template <typename Scalar>
std::int64_t as_index(Scalar v) {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(v)));
}

namespace detail {

/// Maps a flat index in `out_shape` to the flat index of a right-aligned
/// broadcast operand of shape `in_shape`.
inline std::int64_t broadcast_source_index(std::int64_t flat, const Shape& out_shape,
                                           const std::vector<std::int64_t>& out_strides,
                                           const Shape& in_shape,
                                           const std::vector<std::int64_t>& in_strides) {
  std::int64_t src = 0;
  const std::size_t offset = out_shape.size() - in_shape.size();
  for (std::size_t d = 0; d < out_shape.size(); ++d) {
    const std::int64_t coord = (flat / out_strides[d]) % out_shape[d];
    if (d >= offset) {
      const std::size_t sd = d - offset;
      if (in_shape[sd] != 1) src += coord * in_strides[sd];
    }
  }
  return src;
}

}  // namespace detail

template <typename Scalar, typename Fn>
Tensor<Scalar> binary_broadcast(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Fn&& fn) {
  Tensor<Scalar> out = Tensor<Scalar>::zeros(a.shape());
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = fn(a[i], b[i]);
    return out;
  }
  const auto out_strides = row_major_strides(a.shape());
  const auto b_strides = row_major_strides(b.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const std::int64_t j =
        detail::broadcast_source_index(i, a.shape(), out_strides, b.shape(), b_strides);
    out[i] = fn(a[i], b[j]);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary_broadcast(a, b, [](Scalar x, Scalar y) { return x + y; });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary_broadcast(a, b, [](Scalar x, Scalar y) { return x * y; });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary_broadcast(a, b, [](Scalar x, Scalar y) { return x / y; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, double c) {
  Tensor<Scalar> out = a;
  out.arr() += static_cast<Scalar>(c);
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& a, double c) {
  Tensor<Scalar> out = a;
  out.arr() *= static_cast<Scalar>(c);
  return out;
}

// Gelu uses the tanh approximation throughout.
template <typename Scalar>
Scalar gelu_one(Scalar x) {
  const Scalar kAlpha = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  const Scalar kBeta = static_cast<Scalar>(0.044715);
  const Scalar inner = kAlpha * (x + kBeta * x * x * x);
  return static_cast<Scalar>(0.5) * x * (static_cast<Scalar>(1) + std::tanh(inner));
}

template <typename Scalar>
Scalar gelu_grad_one(Scalar x) {
  const Scalar kAlpha = static_cast<Scalar>(0.7978845608028654);
  const Scalar kBeta = static_cast<Scalar>(0.044715);
  const Scalar inner = kAlpha * (x + kBeta * x * x * x);
  const Scalar t = std::tanh(inner);
  const Scalar sech2 = static_cast<Scalar>(1) - t * t;
  const Scalar dinner = kAlpha * (static_cast<Scalar>(1) + static_cast<Scalar>(3) * kBeta * x * x);
  return static_cast<Scalar>(0.5) * (static_cast<Scalar>(1) + t) +
         static_cast<Scalar>(0.5) * x * sech2 * dinner;
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = gelu_one(x[i]);
  return out;
}

template <typename Scalar>
Tensor<Scalar> gelu_grad(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  Tensor<Scalar> out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = gelu_grad_one(x[i]) * dy[i];
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] > Scalar(0) ? x[i] : Scalar(0);
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu_grad(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  Tensor<Scalar> out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] > Scalar(0) ? dy[i] : Scalar(0);
  return out;
}

/// y = x . W^T (+ bias). x [.., in] is treated as a [rows, in] matrix.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>* bias) {
  const std::int64_t in = w.dim(1);
  const std::int64_t out_features = w.dim(0);
  const std::int64_t rows = x.numel() / in;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(out_features);
  Tensor<Scalar> y = Tensor<Scalar>::zeros(out_shape);
  y.mat(rows, out_features).noalias() = x.mat(rows, in) * w.mat(out_features, in).transpose();
  if (bias) {
    y.mat(rows, out_features).rowwise() +=
        Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias->data(), out_features);
  }
  return y;
}

/// Rank-2 x rank-2, or identical leading batch dims on both operands.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const std::size_t ra = a.rank();
  const std::int64_t m = a.dim(static_cast<std::int64_t>(ra) - 2);
  const std::int64_t k = a.dim(static_cast<std::int64_t>(ra) - 1);
  const std::int64_t n = b.dim(static_cast<std::int64_t>(b.rank()) - 1);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  const std::int64_t batches = a.numel() / (m * k);
  for (std::int64_t g = 0; g < batches; ++g) {
    using Mat = typename Tensor<Scalar>::EigenMat;
    Eigen::Map<const Mat> am(a.data() + g * m * k, m, k);
    Eigen::Map<const Mat> bm(b.data() + g * k * n, k, n);
    Eigen::Map<Mat> om(out.data() + g * m * n, m, n);
    om.noalias() = am * bm;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& scale,
                          const Tensor<Scalar>& bias, double eps) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Tensor<Scalar> y = Tensor<Scalar>::zeros(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* xr = x.data() + r * d;
    Scalar* yr = y.data() + r * d;
    Scalar mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const Scalar diff = xr[i] - mean;
      var += diff * diff;
    }
    var /= static_cast<Scalar>(d);
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    for (std::int64_t i = 0; i < d; ++i) {
      yr[i] = (xr[i] - mean) * rstd * scale[i] + bias[i];
    }
  }
  return y;
}

/// Normalized activations without the affine part, (x - mean) / sqrt(var + eps).
template <typename Scalar>
Tensor<Scalar> layer_norm_xhat(const Tensor<Scalar>& x, double eps) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Tensor<Scalar> y = Tensor<Scalar>::zeros(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* xr = x.data() + r * d;
    Scalar* yr = y.data() + r * d;
    Scalar mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const Scalar diff = xr[i] - mean;
      var += diff * diff;
    }
    var /= static_cast<Scalar>(d);
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    for (std::int64_t i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * rstd;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> layer_norm_grad_x(const Tensor<Scalar>& x, const Tensor<Scalar>& scale,
                                 const Tensor<Scalar>& dy, double eps) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Tensor<Scalar> dx = Tensor<Scalar>::zeros(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* xr = x.data() + r * d;
    const Scalar* dyr = dy.data() + r * d;
    Scalar* dxr = dx.data() + r * d;
    Scalar mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const Scalar diff = xr[i] - mean;
      var += diff * diff;
    }
    var /= static_cast<Scalar>(d);
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    Scalar g_mean = 0;
    Scalar gx_mean = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const Scalar g = dyr[i] * scale[i];
      const Scalar xhat = (xr[i] - mean) * rstd;
      g_mean += g;
      gx_mean += g * xhat;
    }
    g_mean /= static_cast<Scalar>(d);
    gx_mean /= static_cast<Scalar>(d);
    for (std::int64_t i = 0; i < d; ++i) {
      const Scalar g = dyr[i] * scale[i];
      const Scalar xhat = (xr[i] - mean) * rstd;
      dxr[i] = rstd * (g - g_mean - xhat * gx_mean);
    }
  }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, const Tensor<Scalar>& ids) {
  const std::int64_t vocab = table.dim(0);
  const std::int64_t d = table.dim(1);
  Shape out_shape = ids.shape();
  out_shape.push_back(d);
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  for (std::int64_t i = 0; i < ids.numel(); ++i) {
    const std::int64_t id = as_index(ids[i]);
    if (id < 0 || id >= vocab) {
      throw ShapeError("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(vocab) + ")");
    }
    std::copy(table.data() + id * d, table.data() + (id + 1) * d, out.data() + i * d);
  }
  return out;
}

/// Scatter-add of dy rows into a [vocab, d] table gradient.
template <typename Scalar>
Tensor<Scalar> embedding_lookup_grad(const Tensor<Scalar>& ids, const Tensor<Scalar>& dy,
                                     std::int64_t vocab) {
  const std::int64_t d = dy.shape().back();
  Tensor<Scalar> out = Tensor<Scalar>::zeros({vocab, d});
  for (std::int64_t i = 0; i < ids.numel(); ++i) {
    const std::int64_t id = as_index(ids[i]);
    Scalar* row = out.data() + id * d;
    const Scalar* src = dy.data() + i * d;
    for (std::int64_t j = 0; j < d; ++j) row[j] += src[j];
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Tensor<Scalar> y = Tensor<Scalar>::zeros(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* xr = x.data() + r * d;
    Scalar* yr = y.data() + r * d;
    Scalar mx = xr[0];
    for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
    Scalar total = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      total += yr[i];
    }
    for (std::int64_t i = 0; i < d; ++i) yr[i] /= total;
  }
  return y;
}

/// Per-position cross entropy: logits [.., V], labels [..] -> losses [..].
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, const Tensor<Scalar>& labels) {
  const std::int64_t v = logits.shape().back();
  const std::int64_t rows = logits.numel() / v;
  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* lr = logits.data() + r * v;
    const std::int64_t label = as_index(labels[r]);
    if (label < 0 || label >= v) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) +
                       " out of range [0," + std::to_string(v) + ")");
    }
    Scalar mx = lr[0];
    for (std::int64_t i = 1; i < v; ++i) mx = std::max(mx, lr[i]);
    Scalar total = 0;
    for (std::int64_t i = 0; i < v; ++i) total += std::exp(lr[i] - mx);
    out[r] = mx + std::log(total) - lr[label];
  }
  return out;
}

/// d(loss)/d(logits) = (softmax(logits) - onehot(labels)) * dy, per position.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy_grad(const Tensor<Scalar>& logits, const Tensor<Scalar>& labels,
                                          const Tensor<Scalar>& dy) {
  Tensor<Scalar> probs = softmax(logits);
  const std::int64_t v = logits.shape().back();
  const std::int64_t rows = logits.numel() / v;
  for (std::int64_t r = 0; r < rows; ++r) {
    Scalar* pr = probs.data() + r * v;
    pr[as_index(labels[r])] -= Scalar(1);
    const Scalar scale = dy[r];
    for (std::int64_t i = 0; i < v; ++i) pr[i] *= scale;
  }
  return probs;
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape target) {
  return Tensor<Scalar>(std::move(target), std::vector<Scalar>(x.data(), x.data() + x.numel()));
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x, const std::vector<std::int64_t>& perm) {
  const Shape& xs = x.shape();
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out_shape[i] = xs[static_cast<std::size_t>(perm[i])];
  }
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  const auto in_strides = row_major_strides(xs);
  const auto out_strides = row_major_strides(out_shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    std::int64_t src = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      const std::int64_t coord = (i / out_strides[d]) % out_shape[d];
      src += coord * in_strides[static_cast<std::size_t>(perm[d])];
    }
    out[i] = x[src];
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> reduce_sum(const Tensor<Scalar>& x, const std::vector<std::int64_t>& axes,
                          bool keepdims) {
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    const bool reduced =
        std::find(axes.begin(), axes.end(), static_cast<std::int64_t>(d)) != axes.end();
    if (!reduced) {
      out_shape.push_back(x.shape()[d]);
    } else if (keepdims) {
      out_shape.push_back(1);
    }
  }
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  const auto in_strides = row_major_strides(x.shape());
  const auto out_strides = row_major_strides(out_shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    std::int64_t dst = 0;
    std::size_t od = 0;
    for (std::size_t d = 0; d < x.rank(); ++d) {
      const bool reduced =
          std::find(axes.begin(), axes.end(), static_cast<std::int64_t>(d)) != axes.end();
      if (reduced && !keepdims) continue;
      if (!reduced) {
        const std::int64_t coord = (i / in_strides[d]) % x.shape()[d];
        dst += coord * out_strides[od];
      }
      ++od;
    }
    out[dst] += x[i];
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> reduce_mean(const Tensor<Scalar>& x, const std::vector<std::int64_t>& axes,
                           bool keepdims) {
  Tensor<Scalar> out = reduce_sum(x, axes, keepdims);
  std::int64_t count = 1;
  for (std::int64_t a : axes) count *= x.shape()[static_cast<std::size_t>(a)];
  out.arr() /= static_cast<Scalar>(count);
  return out;
}

template <typename Scalar>
Tensor<Scalar> broadcast_to(const Tensor<Scalar>& x, const Shape& target) {
  Tensor<Scalar> out = Tensor<Scalar>::zeros(target);
  const auto out_strides = row_major_strides(target);
  const auto in_strides = row_major_strides(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    out[i] = x[detail::broadcast_source_index(i, target, out_strides, x.shape(), in_strides)];
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b, std::int64_t axis) {
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  std::int64_t outer = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= a.dim(d);
  std::int64_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < a.rank(); ++d) {
    inner *= a.shape()[d];
  }
  const std::int64_t a_block = a.dim(axis) * inner;
  const std::int64_t b_block = b.dim(axis) * inner;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(a.data() + o * a_block, a.data() + (o + 1) * a_block,
              out.data() + o * (a_block + b_block));
    std::copy(b.data() + o * b_block, b.data() + (o + 1) * b_block,
              out.data() + o * (a_block + b_block) + a_block);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, std::int64_t axis, std::int64_t start,
                     std::int64_t len) {
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  std::int64_t outer = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  std::int64_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < x.rank(); ++d) {
    inner *= x.shape()[d];
  }
  const std::int64_t in_block = x.dim(axis) * inner;
  const std::int64_t out_block = len * inner;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(x.data() + o * in_block + start * inner,
              x.data() + o * in_block + (start + len) * inner, out.data() + o * out_block);
  }
  return out;
}

/// Adjoint of slice: places dy into a zero tensor whose sliced axis has
/// `full_len` elements.
template <typename Scalar>
Tensor<Scalar> slice_grad(const Tensor<Scalar>& dy, std::int64_t axis, std::int64_t start,
                          std::int64_t full_len) {
  Shape out_shape = dy.shape();
  out_shape[static_cast<std::size_t>(axis)] = full_len;
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  std::int64_t outer = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= dy.dim(d);
  std::int64_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < dy.rank(); ++d) {
    inner *= dy.shape()[d];
  }
  const std::int64_t len = dy.dim(axis);
  const std::int64_t in_block = len * inner;
  const std::int64_t out_block = full_len * inner;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(dy.data() + o * in_block, dy.data() + (o + 1) * in_block,
              out.data() + o * out_block + start * inner);
  }
  return out;
}

/// First index of the maximum along the last dim (ties break low).
template <typename Scalar>
Tensor<Scalar> argmax(const Tensor<Scalar>& x) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* xr = x.data() + r * d;
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < d; ++i) {
      if (xr[i] > xr[best]) best = i;
    }
    out[r] = static_cast<Scalar>(best);
  }
  return out;
}

/// Adjoint of a broadcast: sums dy over the broadcast dims back to `target`.
template <typename Scalar>
Tensor<Scalar> reduce_to_shape(const Tensor<Scalar>& dy, const Shape& target) {
  if (dy.shape() == target) return dy;
  std::vector<std::int64_t> axes;
  const std::size_t offset = dy.rank() - target.size();
  for (std::size_t d = 0; d < dy.rank(); ++d) {
    if (d < offset || target[d - offset] == 1) axes.push_back(static_cast<std::int64_t>(d));
  }
  Tensor<Scalar> summed = reduce_sum(dy, axes, false);
  return reshape(summed, target);
}

}  // namespace shardweave::kernels
