#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "encodenet/error.hpp"

namespace encodenet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major tensor. A default-constructed tensor is empty (rank 0, no
// storage); every other tensor has strictly positive dimensions and exactly
// product(shape) elements.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_)) {
      throw ShapeError("tensor data has " + std::to_string(data_.size()) + " elements, shape " +
                       shape_string(shape_) + " needs " + std::to_string(shape_numel(shape_)));
    }
  }

  static BasicTensor uniform(Shape shape, T low, T high, std::mt19937_64& rng) {
    BasicTensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(low), static_cast<double>(high));
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW accessor for rank-4 tensors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  BasicTensor reshaped(Shape shape) const {
    if (checked_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const noexcept {
    for (const T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(T value) noexcept { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  static std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (const auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    return shape_numel(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Copies rows [begin, begin + count) along the leading axis.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& t, std::size_t begin, std::size_t count) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = count;
  std::vector<T> out(t.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                     t.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  return BasicTensor<T>(std::move(shape), std::move(out));
}

// Gathers the listed rows along the leading axis, in the given order.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = rows.size();
  std::vector<T> out;
  out.reserve(rows.size() * stride);
  for (const auto r : rows) {
    const auto first = t.data().begin() + static_cast<std::ptrdiff_t>(r * stride);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return BasicTensor<T>(std::move(shape), std::move(out));
}

}  // namespace encodenet
