#pragma once

// Numeric kernels over Tensor: grouped convolution, linear algebra,
// activations, normalization, and layout operations. All functions are pure
// except batchnorm_train, which updates the running statistics it is given.

#include <optional>
#include <vector>

#include "ffnet/tensor.hpp"

namespace ffnet {

enum class PadFill { zeros, circular };

/// Explicit per-side padding. 1-D convolutions use left/right only.
struct Padding {
  std::size_t top = 0;
  std::size_t bottom = 0;
  std::size_t left = 0;
  std::size_t right = 0;
  PadFill fill = PadFill::zeros;

  /// (k-1)/2 per side; even kernel sizes are rejected.
  static Padding same(std::size_t kh, std::size_t kw, PadFill fill = PadFill::zeros);
  static Padding same1d(std::size_t k, PadFill fill = PadFill::zeros);

  bool operator==(const Padding&) const = default;
};

struct ConvGeometry {
  std::size_t stride = 1;
  Padding padding;
  std::size_t groups = 1;

  bool operator==(const ConvGeometry&) const = default;
};

/// Convolution parameters. weight is [outC, inC/groups, kH, kW] for 2-D or
/// [outC, inC/groups, k] for 1-D; bias is [outC].
template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  ConvGeometry geometry;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1) * geometry.groups; }
  std::size_t kernel_h() const { return weight.rank() == 4 ? weight.dim(2) : 1; }
  std::size_t kernel_w() const { return weight.dim(weight.rank() - 1); }
  bool is_depthwise() const {
    return geometry.groups == in_channels() && geometry.groups == out_channels() && weight.dim(1) == 1;
  }
  /// Throws ShapeError unless the channel/group/bias arithmetic is consistent.
  void validate() const;
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  static BatchNormParams identity(std::size_t channels, T epsilon = T(1e-5));
  std::size_t channels() const { return gamma.size(); }
  void validate() const;
};

enum class NormMode { train, infer };

// ---- convolution ---------------------------------------------------------

/// Raw 2-D grouped cross-correlation. bias may be null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, const ConvGeometry& geom);

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& grad_out, const Tensor<T>& weight, const Shape& input_shape,
                            const ConvGeometry& geom);

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& grad_out, const Tensor<T>& x, const Shape& weight_shape,
                             const ConvGeometry& geom);

/// Output spatial size for one axis.
std::size_t conv_out_size(std::size_t in, std::size_t pad_total, std::size_t kernel, std::size_t stride);

template <typename T>
Tensor<T> grouped_conv2d(const Tensor<T>& x, const ConvLayer<T>& layer);

template <typename T>
Tensor<T> grouped_conv1d(const Tensor<T>& x, const ConvLayer<T>& layer);

/// Depthwise convolution: grouped_conv2d with groups == channels.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvLayer<T>& layer);

// ---- linear algebra ------------------------------------------------------

/// [m,k] x [k,n]. Rank > 2 operands are batched over matching leading dims;
/// a rank-2 right operand is shared across the batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a);

// ---- elementwise ---------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

/// x + b broadcast along `axis` (b has x.dim(axis) entries).
template <typename T>
Tensor<T> add_along(const Tensor<T>& x, const Tensor<T>& b, std::size_t axis);
/// x * g broadcast along `axis`.
template <typename T>
Tensor<T> mul_along(const Tensor<T>& x, const Tensor<T>& g, std::size_t axis);

template <typename T>
T gelu_scalar(T x);
/// d/dx of exact GELU.
template <typename T>
T gelu_grad_scalar(T x);

/// x * Phi(x), exact erf form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// ---- normalization -------------------------------------------------------

template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const BatchNormParams<T>& p);

/// Normalizes with batch statistics and updates p's running statistics.
/// Running variance uses the unbiased estimate.
template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, BatchNormParams<T>& p);

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p, NormMode mode);

// ---- reductions ----------------------------------------------------------

template <typename T>
T sum(const Tensor<T>& x);
template <typename T>
T mean(const Tensor<T>& x);

// ---- layout --------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T>
Tensor<T> reshape(Tensor<T>&& x, const Shape& shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
/// Zero padding; before/after give per-axis amounts (size == rank).
template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::size_t>& before, const std::vector<std::size_t>& after);
/// Crops the region pad() added.
template <typename T>
Tensor<T> unpad(const Tensor<T>& x, const std::vector<std::size_t>& before, const std::vector<std::size_t>& after);
/// Collapses axes [start_axis, rank) into one.
template <typename T>
Tensor<T> flatten(const Tensor<T>& x, std::size_t start_axis);

Shape permuted_shape(const Shape& shape, const std::vector<std::size_t>& perm);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

}  // namespace ffnet
