// Copyright 2026 The nvrm Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nvrm/errors.hpp"

namespace nvrm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using VectorMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVectorMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

/// Dense row-major n-dimensional array. Scalars have an empty shape.
///
/// Storage is aligned to Eigen's maximum vector width. Vectorized kernels
/// peel leading elements according to the buffer address, so unaligned
/// buffers would make rounding depend on where the allocator put the data.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Rows and columns of a rank-2 tensor; a rank-1 tensor is one row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  MatrixMap<T> matrix() { return MatrixMap<T>(data_.data(), rows(), cols()); }
  ConstMatrixMap<T> matrix() const { return ConstMatrixMap<T>(data_.data(), rows(), cols()); }
  VectorMap<T> array() { return VectorMap<T>(data_.data(), data_.size()); }
  ConstVectorMap<T> array() const { return ConstVectorMap<T>(data_.data(), data_.size()); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage data_;
};

/// Gathers rows `indices` of a rank-2 tensor.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, std::span<const std::size_t> indices) {
  const std::size_t d = src.cols();
  Tensor<T> out(Shape{indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data().begin() + indices[i] * d, d, out.data().begin() + i * d);
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& src, std::size_t begin, std::size_t end) {
  const std::size_t d = src.cols();
  Tensor<T> out(Shape{end - begin, d});
  std::copy(src.data().begin() + begin * d, src.data().begin() + end * d, out.data().begin());
  return out;
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  std::vector<To> data(src.size());
  std::transform(src.data().begin(), src.data().end(), data.begin(),
                 [](From v) { return static_cast<To>(v); });
  return Tensor<To>(src.shape(), std::move(data));
}

}  // namespace nvrm
