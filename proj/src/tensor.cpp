#include "ffnet/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace ffnet {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape_));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape_));
  if (numel(shape_) != data_.size())
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch for " + to_string(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : idx) {
    if (i >= shape_[axis]) throw ShapeError("index out of range for " + to_string(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> idx) {
  return data_[offset(idx)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> idx) const {
  return data_[offset(idx)];
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (T v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + where);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
Tensor<T> randn(const Shape& shape, Rng& rng, T stddev, T mean) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(mean + stddev * dist(rng));
  return t;
}

template <typename T>
Tensor<T> uniform(const Shape& shape, Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> trunc_normal(const Shape& shape, Rng& rng, T stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t(shape);
  for (auto& v : t.data()) {
    double z;
    do {
      z = dist(rng);
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * stddev);
  }
  return t;
}

#define FFNET_INSTANTIATE(T)                                                  \
  template class Tensor<T>;                                                   \
  template void check_finite<T>(const Tensor<T>&, const char*);               \
  template T max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);             \
  template T max_abs<T>(const Tensor<T>&);                                    \
  template Tensor<T> randn<T>(const Shape&, Rng&, T, T);                      \
  template Tensor<T> uniform<T>(const Shape&, Rng&, T, T);                    \
  template Tensor<T> trunc_normal<T>(const Shape&, Rng&, T);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
