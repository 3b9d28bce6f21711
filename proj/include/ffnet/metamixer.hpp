#pragma once

// Query-key-value mixers: closed-form reference implementations and a
// generic pipeline assembled from interchangeable sub-operations.

#include <optional>
#include <string>

#include "ffnet/kernels.hpp"

namespace ffnet {

// ---- reference instantiations ----------------------------------------------

/// W_Q, W_K, W_V are [d, d]; head h uses columns [h*d_h, (h+1)*d_h).
template <typename T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v;
  std::size_t heads = 1;

  std::size_t dim() const { return w_q.dim(0); }
  std::size_t head_dim() const { return w_q.dim(1) / heads; }
  void validate() const;
};

/// W1, W2 are [d_m, d].
template <typename T>
struct FFNParams {
  Tensor<T> w1, w2, b1, b2;

  std::size_t hidden() const { return w1.dim(0); }
  void validate() const;
};

template <typename T>
struct FFNifiedParams {
  ConvLayer<T> proj;  // 1x1
  ConvLayer<T> keys;  // depthwise kxk
  ConvLayer<T> values;
};

template <typename T>
struct ConvNeXtParams {
  ConvLayer<T> dw;
  BatchNormParams<T> norm;
  ConvLayer<T> expand;  // 1x1, C -> rC
  ConvLayer<T> reduce;  // 1x1, rC -> C
};

/// Per-head softmax(Q K^T / sqrt(d_h)) V, heads concatenated. x is [n, d].
template <typename T>
Tensor<T> self_attention_reference(const Tensor<T>& x, const AttentionParams<T>& p);

/// gelu(x W1^T + b1) W2 + b2.
template <typename T>
Tensor<T> ffn_reference(const Tensor<T>& x, const FFNParams<T>& p);

/// FFN along the token axis: (gelu(x^T W_s1^T) W_s2^T)^T. W_s1 is [d_s, n], W_s2 is [n, d_s].
template <typename T>
Tensor<T> spatial_mlp_reference(const Tensor<T>& x, const Tensor<T>& w_s1, const Tensor<T>& w_s2);

/// 1x1 conv, depthwise conv, GELU, depthwise conv.
template <typename T>
Tensor<T> ffnified_attention_forward(const Tensor<T>& x, const FFNifiedParams<T>& p);

/// Depthwise conv, BN (infer), 1x1 expand, GELU, 1x1 reduce. No residual.
template <typename T>
Tensor<T> convnext_block_forward(const Tensor<T>& x, const ConvNeXtParams<T>& p);

// ---- generic pipeline ------------------------------------------------------

enum class QueryProjection { identity, pointwise_linear, depthwise_conv };
enum class Compatibility { token_dot_product, depthwise_conv, dense_spatial };
enum class Activation { softmax, gelu, relu };
enum class Aggregation { token_weighted_sum, depthwise_conv, dense_spatial };

const char* to_string(QueryProjection v);
const char* to_string(Compatibility v);
const char* to_string(Activation v);
const char* to_string(Aggregation v);

/// Keys and values computed from the input by 1x1 projections ([d, d] each).
template <typename T>
struct DynamicKV {
  Tensor<T> w_k, w_v;
  std::size_t heads = 1;
};

/// Fixed memories. Layout depends on the compatibility form:
///   token_dot_product: keys [m, d], values [m, d]
///   dense_spatial:     keys [m, n], values [m, n]
///   depthwise_conv:    keys/values are depthwise kernels [d, 1, k, k]
/// Biases are optional: key_bias has one entry per key slot (or channel),
/// value_bias one per output channel (or token for dense_spatial).
template <typename T>
struct StaticKV {
  Tensor<T> keys, values, key_bias, value_bias;
  ConvGeometry geometry;  // depthwise form only
};

template <typename T>
struct MixerSpec {
  QueryProjection query_projection = QueryProjection::identity;
  std::optional<ConvLayer<T>> query_layer;
  std::optional<BatchNormParams<T>> query_norm;  // applied after the query projection
  std::optional<DynamicKV<T>> dynamic_kv;
  std::optional<StaticKV<T>> static_kv;
  Compatibility compatibility = Compatibility::token_dot_product;
  Activation activation = Activation::softmax;
  Aggregation aggregation = Aggregation::token_weighted_sum;
  /// Multiplies token dot products; nullopt means 1/sqrt(d_h) for dynamic
  /// keys and 1 for static ones.
  std::optional<T> logit_scale;
};

template <typename T>
class Mixer {
 public:
  const MixerSpec<T>& spec() const { return spec_; }

 private:
  explicit Mixer(MixerSpec<T> spec) : spec_(std::move(spec)) {}
  MixerSpec<T> spec_;

  template <typename U>
  friend Mixer<U> build_mixer(MixerSpec<U> spec);
};

/// Throws ConfigError for unsupported sub-operation combinations.
template <typename T>
Mixer<T> build_mixer(MixerSpec<T> spec);

/// x is either a token matrix [n, d] or a feature map [B, C, H, W]; the
/// output has the same layout.
template <typename T>
Tensor<T> mixer_forward(const Mixer<T>& mixer, const Tensor<T>& x);

// Specs reproducing each reference instantiation.
template <typename T>
MixerSpec<T> attention_spec(const AttentionParams<T>& p);
template <typename T>
MixerSpec<T> ffn_spec(const FFNParams<T>& p);
template <typename T>
MixerSpec<T> spatial_mlp_spec(const Tensor<T>& w_s1, const Tensor<T>& w_s2);
template <typename T>
MixerSpec<T> ffnified_spec(const FFNifiedParams<T>& p);
template <typename T>
MixerSpec<T> convnext_spec(const ConvNeXtParams<T>& p);

// Random instances for equivalence sweeps.
template <typename T>
AttentionParams<T> random_attention(std::size_t d, std::size_t heads, Rng& rng);
template <typename T>
FFNParams<T> random_ffn(std::size_t d, std::size_t d_m, Rng& rng);
template <typename T>
FFNifiedParams<T> random_ffnified(std::size_t c, std::size_t k, Rng& rng, PadFill fill = PadFill::zeros);
template <typename T>
ConvNeXtParams<T> random_convnext(std::size_t c, std::size_t k, std::size_t ratio, Rng& rng);

}  // namespace ffnet
