#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "combo/error.hpp"

namespace combo {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor of rank 1..3. Real is float (training) or
/// double (oracle and gradient-check builds).
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " holds " +
                           std::to_string(shape_size(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  template <class Other>
  static Tensor cast(const Tensor<Other>& other) {
    std::vector<Real> d(other.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Real>(other[i]);
    return Tensor(other.shape(), std::move(d));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  /// Extent of the last axis.
  std::size_t cols() const { return shape_.back(); }
  /// Product of all leading axes.
  std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / shape_.back(); }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> span() noexcept { return data_; }
  std::span<const Real> span() const noexcept { return data_; }
  const std::vector<Real>& values() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data viewed with a different shape of equal size.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

}  // namespace combo
