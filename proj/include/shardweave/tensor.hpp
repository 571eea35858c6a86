#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace shardweave {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Error for malformed or non-conforming tensor shapes. Messages name the
/// offending op and the shapes involved.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense n-dimensional row-major tensor of floating-point values.
///
/// The scalar type is the dtype: Tensor<double> for f64 (the test dtype),
/// Tensor<float> for f32 (the demo dtype). Tensors are plain values; ops
/// return new tensors and never mutate their inputs, so sharing across
/// threads is safe.
template <typename Scalar>
class Tensor {
  static_assert(std::is_floating_point_v<Scalar>);

 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match data size " +
                       std::to_string(data_.size()));
    }
    check_dims();
  }

  static Tensor zeros(Shape shape) {
    const std::int64_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<Scalar>(static_cast<std::size_t>(n), Scalar(0)));
  }

  static Tensor full(Shape shape, Scalar value) {
    const std::int64_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<Scalar>(static_cast<std::size_t>(n), value));
  }

  static Tensor scalar(Scalar value) { return Tensor(Shape{}, std::vector<Scalar>{value}); }

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  const Scalar* data() const { return data_.data(); }
  Scalar* data() { return data_.data(); }
  const std::vector<Scalar>& vec() const { return data_; }
  std::vector<Scalar>& vec() { return data_; }

  Scalar operator[](std::int64_t flat) const { return data_[static_cast<std::size_t>(flat)]; }
  Scalar& operator[](std::int64_t flat) { return data_[static_cast<std::size_t>(flat)]; }

  /// Value of a rank-0 or single-element tensor.
  Scalar item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor " + shape_str(shape_) + " is not a scalar");
    }
    return data_[0];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (Scalar v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  using EigenMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<EigenMat>;
  using ConstMatMap = Eigen::Map<const EigenMat>;
  using ArrMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  /// 2-D Eigen view of the flat data as a (rows x cols) row-major matrix.
  ConstMatMap mat(std::int64_t rows, std::int64_t cols) const {
    return ConstMatMap(data_.data(), rows, cols);
  }
  MatMap mat(std::int64_t rows, std::int64_t cols) {
    return MatMap(data_.data(), rows, cols);
  }

  ConstArrMap arr() const { return ConstArrMap(data_.data(), numel()); }
  ArrMap arr() { return ArrMap(data_.data(), numel()); }

 private:
  static std::int64_t checked_numel(const Shape& shape) {
    for (std::int64_t d : shape) {
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  void check_dims() const {
    for (std::int64_t d : shape_) {
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<Scalar, float>) {
    return Dtype::f32;
  } else {
    return Dtype::f64;
  }
}

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

}  // namespace shardweave
