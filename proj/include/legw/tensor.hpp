// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "legw/errors.hpp"

namespace legw {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  // Aligned storage keeps Eigen's vectorized reductions on one summation
  // order regardless of where the heap puts the buffer.
  using Storage = std::vector<double, Eigen::aligned_allocator<double>>;
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_size(shape_)), fill);
  }
  Tensor(Shape shape, const std::vector<double>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    validate_shape();
    if (static_cast<std::int64_t>(data_.size()) != shape_size(shape_)) {
      throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::initializer_list<double> v) {
    return Tensor(Shape{static_cast<std::int64_t>(v.size())}, std::vector<double>(v));
  }
  static Tensor vector(const std::vector<double>& v) { return Tensor(Shape{static_cast<std::int64_t>(v.size())}, v); }
  static Tensor matrix(std::int64_t rows, std::int64_t cols, std::vector<double> data) {
    return Tensor(Shape{rows, cols}, std::move(data));
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t rank() const noexcept { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  /// Rows/cols of the 2-D view: rank 0 is 1x1, rank 1 is 1xN, higher ranks
  /// fold every leading axis into rows.
  std::int64_t rows() const noexcept {
    if (shape_.size() < 2) return 1;
    return size() / shape_.back();
  }
  std::int64_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  Storage& storage() noexcept { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  double& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  double at(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * cols() + c)];
  }
  double item() const {
    if (data_.size() != 1) throw InvalidArgument("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  MatrixMap matrix() noexcept { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const noexcept { return ConstMatrixMap(data_.data(), rows(), cols()); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Exact (bitwise for non-NaN values) equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (auto d : shape_) {
      if (d <= 0) throw InvalidArgument("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Storage data_{0.0};
};

/// Named collection of tensors (parameters, gradients, graph inputs).
using NamedTensors = std::map<std::string, Tensor>;

inline double dot(const NamedTensors& a, const NamedTensors& b) {
  double s = 0.0;
  for (const auto& [name, t] : a) {
    const auto it = b.find(name);
    if (it == b.end()) throw InvalidArgument("missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) throw InvalidArgument("shape mismatch for '" + name + "'");
    for (std::int64_t i = 0; i < t.size(); ++i) s += t[i] * it->second[i];
  }
  return s;
}

inline double norm(const NamedTensors& a) { return std::sqrt(dot(a, a)); }
inline double norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

inline std::int64_t total_size(const NamedTensors& a) {
  std::int64_t n = 0;
  for (const auto& [_, t] : a) n += t.size();
  return n;
}

/// out = a + alpha * b, name by name.
inline NamedTensors axpy(const NamedTensors& a, double alpha, const NamedTensors& b) {
  NamedTensors out = a;
  for (auto& [name, t] : out) {
    const auto it = b.find(name);
    if (it == b.end()) throw InvalidArgument("missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) throw InvalidArgument("shape mismatch for '" + name + "'");
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] += alpha * it->second[i];
  }
  return out;
}

inline NamedTensors scaled(const NamedTensors& a, double alpha) {
  NamedTensors out = a;
  for (auto& [_, t] : out) {
    for (double& v : t.data()) v *= alpha;
  }
  return out;
}

}  // namespace legw
