#pragma once

// Trainable layer records shared by the image and time-series models.

#include <optional>
#include <string>
#include <vector>

#include "ffnet/autodiff.hpp"

namespace ffnet {

/// A trainable tensor. Copies are deep: a copied model owns fresh leaves.
template <typename T>
class Param {
 public:
  Param() = default;
  explicit Param(Tensor<T> v) : var_(ad::Var<T>::param(std::move(v))) {}
  Param(const Param& o) : var_(o.defined() ? ad::Var<T>::leaf(o.value(), o.requires_grad()) : ad::Var<T>{}) {}
  Param& operator=(const Param& o) {
    if (this != &o) var_ = Param(o).var_;
    return *this;
  }
  Param(Param&&) noexcept = default;
  Param& operator=(Param&&) noexcept = default;

  bool defined() const { return var_.defined(); }
  const ad::Var<T>& var() const { return var_; }
  const Tensor<T>& value() const { return var_.value(); }
  Tensor<T>& value() { return var_.mutable_value(); }
  bool requires_grad() const { return var_.requires_grad(); }
  void set_requires_grad(bool on) { var_.node_ptr()->requires_grad = on; }

 private:
  ad::Var<T> var_;
};

template <typename T>
struct ConvParam {
  Param<T> weight;
  Param<T> bias;  // may be undefined
  ConvGeometry geometry;

  ConvLayer<T> layer() const;
  static ConvParam from(const ConvLayer<T>& l);
};

template <typename T>
struct BNParam {
  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  BatchNormParams<T> params() const;
  static BNParam from(const BatchNormParams<T>& p);
  static BNParam identity(std::size_t channels);
};

/// conv -> optional BN.
template <typename T>
struct ConvBranch {
  ConvParam<T> conv;
  std::optional<BNParam<T>> bn;
};

/// Main branch plus auxiliary branches whose outputs are summed.
template <typename T>
struct BranchedConv {
  ConvBranch<T> main;
  std::vector<ConvBranch<T>> aux;

  std::size_t out_channels() const { return main.conv.weight.value().dim(0); }
};

/// Truncated-normal weights (std 0.02), zero bias when requested.
template <typename T>
ConvParam<T> make_conv(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, ConvGeometry geom,
                       bool bias, Rng& rng, T stddev = T(0.02));
template <typename T>
ConvParam<T> make_conv1d(std::size_t out, std::size_t in, std::size_t k, ConvGeometry geom, bool bias, Rng& rng,
                         T stddev = T(0.02));

/// k x k conv + BN with "same" padding, optional auxiliary branches with
/// their own BN.
template <typename T>
BranchedConv<T> make_branched(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, std::size_t stride,
                              std::size_t groups, PadFill fill, const std::vector<std::pair<std::size_t, std::size_t>>& aux,
                              Rng& rng);

template <typename T>
ad::Var<T> conv_forward(const ConvParam<T>& c, const ad::Var<T>& x);
template <typename T>
ad::Var<T> bn_forward(BNParam<T>& bn, const ad::Var<T>& x, NormMode mode);
template <typename T>
ad::Var<T> branch_forward(ConvBranch<T>& b, const ad::Var<T>& x, NormMode mode);
template <typename T>
ad::Var<T> branched_forward(BranchedConv<T>& b, const ad::Var<T>& x, NormMode mode);

/// Multiply-accumulates of one conv at the given output resolution.
std::size_t conv_macs(const Shape& weight_shape, std::size_t out_h, std::size_t out_w);

template <typename T>
struct ParamRef {
  std::string name;
  Param<T>* param;
};

template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T>* tensor;
};

/// Named views into a model's trainable parameters and running statistics.
template <typename T>
struct StateRefs {
  std::vector<ParamRef<T>> params;
  std::vector<BufferRef<T>> buffers;

  void add(const std::string& name, Param<T>& p);
  void add(const std::string& prefix, ConvParam<T>& c);
  void add(const std::string& prefix, BNParam<T>& bn);
  void add(const std::string& prefix, ConvBranch<T>& b);
  void add(const std::string& prefix, BranchedConv<T>& b);

  std::size_t param_count() const;
  std::vector<ad::Var<T>> vars() const;
  void set_requires_grad(bool on);
};

}  // namespace ffnet
