#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ffnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes, ranks, or channel/group arithmetic.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or unsupported combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array (last axis fastest). Owns its storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Multi-index access, bounds-checked.
  T& at(std::initializer_list<std::size_t> idx);
  const T& at(std::initializer_list<std::size_t> idx) const;
  std::size_t offset(std::initializer_list<std::size_t> idx) const;

  template <typename U>
  Tensor<U> cast() const {
    if (data_.empty()) return {};
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;
  void fill(T v);

  /// Moves the storage out, leaving this tensor empty.
  std::vector<T> release() {
    shape_.clear();
    return std::move(data_);
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

/// Throws NumericError naming `where` if any element is NaN/Inf.
template <typename T>
void check_finite(const Tensor<T>& t, const char* where);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T max_abs(const Tensor<T>& a);

template <typename T>
Tensor<T> randn(const Shape& shape, Rng& rng, T stddev = T(1), T mean = T(0));

template <typename T>
Tensor<T> uniform(const Shape& shape, Rng& rng, T lo, T hi);

/// Normal samples with rejection outside [-2σ, 2σ].
template <typename T>
Tensor<T> trunc_normal(const Shape& shape, Rng& rng, T stddev);

}  // namespace ffnet
