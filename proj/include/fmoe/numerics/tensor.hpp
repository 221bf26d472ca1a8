// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmoe/errors.hpp"

namespace fmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major array with an optional gradient accumulator. Rank-0 and
// rank-1 tensors are viewed as a single row by the matrix accessors.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) +
                           " does not match " + std::to_string(data_.size()) +
                           " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t rows() const noexcept {
    if (shape_.size() < 2) return 1;
    return data_.size() / shape_.back();
  }
  std::size_t cols() const noexcept {
    return shape_.empty() ? 1 : shape_.back();
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  T item() const {
    if (data_.size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  bool has_grad() const noexcept { return has_grad_; }

  std::span<T> grad() {
    if (!has_grad_) throw ContractError("tensor has no gradient");
    return grad_;
  }
  std::span<const T> grad() const {
    if (!has_grad_) throw ContractError("tensor has no gradient");
    return grad_;
  }

  // Allocates a zero accumulator on first use.
  std::span<T> grad_accumulator() {
    if (!has_grad_) {
      grad_.assign(data_.size(), T{0});
      has_grad_ = true;
    }
    return grad_;
  }

  void clear_grad() noexcept {
    grad_.clear();
    has_grad_ = false;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool has_grad_ = false;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

}  // namespace fmoe
