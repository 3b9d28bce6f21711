#include "ffnet/metamixer.hpp"

#include <cmath>

namespace ffnet {

template <typename T>
void AttentionParams<T>::validate() const {
  if (w_q.rank() != 2 || w_q.dim(0) != w_q.dim(1) || w_k.shape() != w_q.shape() || w_v.shape() != w_q.shape())
    throw ShapeError("attention projections must be square [d, d] and equal in shape");
  if (heads == 0 || w_q.dim(1) % heads != 0)
    throw ShapeError("model width " + std::to_string(w_q.dim(1)) + " not divisible by head count " +
                     std::to_string(heads));
}

template <typename T>
void FFNParams<T>::validate() const {
  if (w1.rank() != 2 || w2.shape() != w1.shape())
    throw ShapeError("FFN weights must both be [d_m, d], got " + to_string(w1.shape()) + " and " +
                     to_string(w2.shape()));
  if (!b1.empty() && b1.shape() != Shape{w1.dim(0)}) throw ShapeError("FFN b1 must be [d_m]");
  if (!b2.empty() && b2.shape() != Shape{w1.dim(1)}) throw ShapeError("FFN b2 must be [d]");
}

namespace {

template <typename T>
void add_row_bias(Tensor<T>& m, const Tensor<T>& b) {
  if (b.empty()) return;
  const std::size_t cols = m.dim(m.rank() - 1);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] += b[i % cols];
}

template <typename T>
Tensor<T> columns(const Tensor<T>& m, std::size_t from, std::size_t count) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor<T> r({rows, count});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < count; ++j) r[i * count + j] = m[i * cols + from + j];
  return r;
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation a, std::size_t axis) {
  switch (a) {
    case Activation::softmax:
      return softmax(x, axis);
    case Activation::gelu:
      return gelu(x);
    case Activation::relu:
      return relu(x);
  }
  throw ConfigError("unknown activation");
}

}  // namespace

template <typename T>
Tensor<T> self_attention_reference(const Tensor<T>& x, const AttentionParams<T>& p) {
  p.validate();
  if (x.rank() != 2 || x.dim(1) != p.dim())
    throw ShapeError("attention input must be [n, " + std::to_string(p.dim()) + "], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), d = p.dim(), dh = p.head_dim();
  const Tensor<T> q = matmul(x, p.w_q), k = matmul(x, p.w_k), v = matmul(x, p.w_v);
  Tensor<T> out({n, d});
  const T s = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Tensor<T> qh = columns(q, h * dh, dh), kh = columns(k, h * dh, dh), vh = columns(v, h * dh, dh);
    const Tensor<T> weights = softmax(scale(matmul(qh, transpose2d(kh)), s), 1);
    const Tensor<T> oh = matmul(weights, vh);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dh; ++j) out[i * d + h * dh + j] = oh[i * dh + j];
  }
  return out;
}

template <typename T>
Tensor<T> ffn_reference(const Tensor<T>& x, const FFNParams<T>& p) {
  p.validate();
  if (x.rank() != 2 || x.dim(1) != p.w1.dim(1))
    throw ShapeError("FFN input must be [n, " + std::to_string(p.w1.dim(1)) + "], got " + to_string(x.shape()));
  Tensor<T> h = matmul(x, transpose2d(p.w1));
  add_row_bias(h, p.b1);
  Tensor<T> y = matmul(gelu(h), p.w2);
  add_row_bias(y, p.b2);
  return y;
}

template <typename T>
Tensor<T> spatial_mlp_reference(const Tensor<T>& x, const Tensor<T>& w_s1, const Tensor<T>& w_s2) {
  if (x.rank() != 2) throw ShapeError("spatial MLP input must be [n, d]");
  const std::size_t n = x.dim(0);
  if (w_s1.rank() != 2 || w_s1.dim(1) != n || w_s2.rank() != 2 || w_s2.dim(0) != n || w_s2.dim(1) != w_s1.dim(0))
    throw ShapeError("spatial MLP weights " + to_string(w_s1.shape()) + ", " + to_string(w_s2.shape()) +
                     " do not match token count " + std::to_string(n));
  const Tensor<T> h = gelu(matmul(transpose2d(x), transpose2d(w_s1)));
  return transpose2d(matmul(h, transpose2d(w_s2)));
}

template <typename T>
Tensor<T> ffnified_attention_forward(const Tensor<T>& x, const FFNifiedParams<T>& p) {
  if (p.proj.kernel_h() != 1 || p.proj.kernel_w() != 1) throw ShapeError("query projection must be 1x1");
  if (!p.keys.is_depthwise() || !p.values.is_depthwise()) throw ShapeError("keys and values must be depthwise");
  if (p.keys.kernel_h() % 2 == 0 || p.keys.kernel_w() % 2 == 0) throw ConfigError("kernel size must be odd");
  const Tensor<T> q = grouped_conv2d(x, p.proj);
  return depthwise_conv2d(gelu(depthwise_conv2d(q, p.keys)), p.values);
}

template <typename T>
Tensor<T> convnext_block_forward(const Tensor<T>& x, const ConvNeXtParams<T>& p) {
  const Tensor<T> q = batchnorm_infer(depthwise_conv2d(x, p.dw), p.norm);
  return grouped_conv2d(gelu(grouped_conv2d(q, p.expand)), p.reduce);
}

// ---- generic pipeline ------------------------------------------------------

const char* to_string(QueryProjection v) {
  switch (v) {
    case QueryProjection::identity: return "identity";
    case QueryProjection::pointwise_linear: return "pointwise-linear";
    case QueryProjection::depthwise_conv: return "depthwise-conv";
  }
  return "?";
}

const char* to_string(Compatibility v) {
  switch (v) {
    case Compatibility::token_dot_product: return "token-dot-product";
    case Compatibility::depthwise_conv: return "depthwise-conv";
    case Compatibility::dense_spatial: return "dense-spatial";
  }
  return "?";
}

const char* to_string(Activation v) {
  switch (v) {
    case Activation::softmax: return "softmax";
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
  }
  return "?";
}

const char* to_string(Aggregation v) {
  switch (v) {
    case Aggregation::token_weighted_sum: return "token-weighted-sum";
    case Aggregation::depthwise_conv: return "depthwise-conv";
    case Aggregation::dense_spatial: return "dense-spatial";
  }
  return "?";
}

template <typename T>
Mixer<T> build_mixer(MixerSpec<T> spec) {
  auto fail = [&](const std::string& why) {
    throw ConfigError(std::string("unsupported mixer (") + to_string(spec.compatibility) + " + " +
                      to_string(spec.aggregation) + "): " + why);
  };
  const bool pair_ok =
      (spec.compatibility == Compatibility::token_dot_product && spec.aggregation == Aggregation::token_weighted_sum) ||
      (spec.compatibility == Compatibility::depthwise_conv && spec.aggregation == Aggregation::depthwise_conv) ||
      (spec.compatibility == Compatibility::dense_spatial && spec.aggregation == Aggregation::dense_spatial);
  if (!pair_ok) fail("compatibility and aggregation forms do not match");
  if (spec.dynamic_kv.has_value() == spec.static_kv.has_value()) fail("exactly one key-value source is required");
  if (spec.dynamic_kv && spec.compatibility != Compatibility::token_dot_product)
    fail("dynamic keys are only defined for token dot products");
  if (spec.activation == Activation::softmax && spec.compatibility == Compatibility::depthwise_conv)
    fail("softmax has no key axis under depthwise compatibility");

  if (spec.query_projection == QueryProjection::identity) {
    if (spec.query_layer) fail("identity query projection takes no layer");
  } else {
    if (!spec.query_layer) fail("query projection layer missing");
    const ConvLayer<T>& q = *spec.query_layer;
    q.validate();
    if (spec.query_projection == QueryProjection::pointwise_linear && (q.kernel_h() != 1 || q.kernel_w() != 1))
      fail("pointwise query projection must be 1x1");
    if (spec.query_projection == QueryProjection::depthwise_conv && !q.is_depthwise())
      fail("depthwise query projection must have groups == channels");
  }
  if (spec.query_norm) spec.query_norm->validate();

  if (spec.dynamic_kv) {
    const DynamicKV<T>& kv = *spec.dynamic_kv;
    if (kv.w_k.rank() != 2 || kv.w_k.dim(0) != kv.w_k.dim(1) || kv.w_v.shape() != kv.w_k.shape())
      fail("dynamic projections must be square [d, d]");
    if (kv.heads == 0 || kv.w_k.dim(1) % kv.heads != 0) fail("width not divisible by head count");
  } else {
    const StaticKV<T>& kv = *spec.static_kv;
    if (spec.compatibility == Compatibility::depthwise_conv) {
      if (kv.keys.rank() != 4 || kv.keys.dim(1) != 1 || kv.values.rank() != 4 || kv.values.dim(1) != 1)
        fail("static depthwise keys/values must be [d, 1, k, k]");
      if (kv.keys.dim(0) != kv.values.dim(0)) fail("keys and values disagree on channel count");
      if (kv.keys.dim(2) % 2 == 0 || kv.keys.dim(3) % 2 == 0) fail("kernel size must be odd");
    } else {
      if (kv.keys.rank() != 2 || kv.values.rank() != 2 || kv.keys.dim(0) != kv.values.dim(0))
        fail("static keys/values must be [m, *] with matching slot count");
      if (!kv.key_bias.empty() && kv.key_bias.size() != kv.keys.dim(0)) fail("key bias must have one entry per slot");
      if (!kv.value_bias.empty() && kv.value_bias.size() != kv.values.dim(1)) fail("value bias size mismatch");
    }
  }
  return Mixer<T>(std::move(spec));
}

namespace {

// [B,C,H,W] <-> token rows [n,d] viewed as [1,d,n,1].
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& x) {
  return reshape(transpose2d(x), {1, x.dim(1), x.dim(0), 1});
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& m) {
  return transpose2d(reshape(m, {m.dim(1), m.dim(2) * m.dim(3)}));
}

template <typename T>
Tensor<T> slice0(const Tensor<T>& t, std::size_t i) {
  const Shape inner(t.shape().begin() + 1, t.shape().end());
  const std::size_t len = numel(inner);
  const auto first = t.vec().begin() + static_cast<long>(i * len);
  return Tensor<T>(inner, std::vector<T>(first, first + static_cast<long>(len)));
}

template <typename T>
Tensor<T> depthwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, ConvGeometry g) {
  g.groups = w.dim(0);
  return conv2d(x, w, b.empty() ? nullptr : &b, g);
}

// [B,d,n] -> [B,n,d]
template <typename T>
Tensor<T> channels_last(const Tensor<T>& x) {
  return permute(reshape(x, {x.dim(0), x.dim(1), x.size() / (x.dim(0) * x.dim(1))}), {0, 2, 1});
}

}  // namespace

template <typename T>
Tensor<T> mixer_forward(const Mixer<T>& mixer, const Tensor<T>& input) {
  const MixerSpec<T>& s = mixer.spec();
  const bool token_rows = input.rank() == 2;
  if (!token_rows && input.rank() != 4)
    throw ShapeError("mixer input must be [n, d] or [B, C, H, W], got " + to_string(input.shape()));
  const Tensor<T> x = token_rows ? tokens_to_map(input) : input;
  const std::size_t b = x.dim(0), d = x.dim(1), hh = x.dim(2), ww = x.dim(3), n = hh * ww;

  Tensor<T> q = s.query_layer ? grouped_conv2d(x, *s.query_layer) : x;
  if (s.query_norm) q = batchnorm_infer(q, *s.query_norm);
  const std::size_t dq = q.dim(1);

  Tensor<T> out;
  switch (s.compatibility) {
    case Compatibility::token_dot_product: {
      const Tensor<T> qt = channels_last(q);  // [B,n,dq]
      if (s.dynamic_kv) {
        const DynamicKV<T>& kv = *s.dynamic_kv;
        if (kv.w_k.dim(0) != d || dq != d) throw ShapeError("dynamic projection width mismatch");
        const Tensor<T> xt = channels_last(x);
        const Tensor<T> k = matmul(xt, kv.w_k), v = matmul(xt, kv.w_v);
        const std::size_t dh = d / kv.heads;
        const T sc = s.logit_scale.value_or(T(1) / std::sqrt(static_cast<T>(dh)));
        Tensor<T> o({b, n, d});
        for (std::size_t bi = 0; bi < b; ++bi) {
          const Tensor<T> qb = slice0(qt, bi), kb = slice0(k, bi), vb = slice0(v, bi);
          for (std::size_t h = 0; h < kv.heads; ++h) {
            const Tensor<T> logits = scale(matmul(columns(qb, h * dh, dh), transpose2d(columns(kb, h * dh, dh))), sc);
            const Tensor<T> c = activate(logits, s.activation, 1);
            const Tensor<T> oh = matmul(c, columns(vb, h * dh, dh));
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < dh; ++j) o[(bi * n + i) * d + h * dh + j] = oh[i * dh + j];
          }
        }
        out = o;
      } else {
        const StaticKV<T>& kv = *s.static_kv;
        if (kv.keys.dim(1) != dq) throw ShapeError("static keys width does not match query width");
        Tensor<T> logits = matmul(qt, transpose2d(kv.keys));  // [B,n,m]
        if (s.logit_scale) logits = scale(logits, *s.logit_scale);
        add_row_bias(logits, kv.key_bias);
        Tensor<T> o = matmul(activate(logits, s.activation, 2), kv.values);  // [B,n,dv]
        add_row_bias(o, kv.value_bias);
        out = o;
      }
      // [B,n,dv] -> [B,dv,H,W]
      out = reshape(permute(out, {0, 2, 1}), {b, out.dim(2), hh, ww});
      break;
    }
    case Compatibility::depthwise_conv: {
      const StaticKV<T>& kv = *s.static_kv;
      const Tensor<T> c = activate(depthwise(q, kv.keys, kv.key_bias, kv.geometry), s.activation, 1);
      out = depthwise(c, kv.values, kv.value_bias, kv.geometry);
      break;
    }
    case Compatibility::dense_spatial: {
      const StaticKV<T>& kv = *s.static_kv;
      if (kv.keys.dim(1) != n || kv.values.dim(1) != n)
        throw ShapeError("dense spatial memories expect " + std::to_string(kv.keys.dim(1)) + " tokens, input has " +
                         std::to_string(n));
      const Tensor<T> rows = reshape(q, {b * dq, n});
      Tensor<T> logits = matmul(rows, transpose2d(kv.keys));
      if (s.logit_scale) logits = scale(logits, *s.logit_scale);
      add_row_bias(logits, kv.key_bias);
      Tensor<T> o = matmul(activate(logits, s.activation, 1), kv.values);
      add_row_bias(o, kv.value_bias);
      out = reshape(std::move(o), {b, dq, hh, ww});
      break;
    }
  }
  check_finite(out, "mixer_forward");
  return token_rows ? map_to_tokens(out) : out;
}

template <typename T>
MixerSpec<T> attention_spec(const AttentionParams<T>& p) {
  p.validate();
  const std::size_t d = p.dim();
  MixerSpec<T> s;
  s.query_projection = QueryProjection::pointwise_linear;
  s.query_layer = ConvLayer<T>{reshape(transpose2d(p.w_q), {d, d, 1, 1}), {}, {}};
  s.dynamic_kv = DynamicKV<T>{p.w_k, p.w_v, p.heads};
  s.compatibility = Compatibility::token_dot_product;
  s.activation = Activation::softmax;
  s.aggregation = Aggregation::token_weighted_sum;
  return s;
}

template <typename T>
MixerSpec<T> ffn_spec(const FFNParams<T>& p) {
  p.validate();
  MixerSpec<T> s;
  s.static_kv = StaticKV<T>{p.w1, p.w2, p.b1, p.b2, {}};
  s.compatibility = Compatibility::token_dot_product;
  s.activation = Activation::gelu;
  s.aggregation = Aggregation::token_weighted_sum;
  return s;
}

template <typename T>
MixerSpec<T> spatial_mlp_spec(const Tensor<T>& w_s1, const Tensor<T>& w_s2) {
  MixerSpec<T> s;
  s.static_kv = StaticKV<T>{w_s1, transpose2d(w_s2), {}, {}, {}};
  s.compatibility = Compatibility::dense_spatial;
  s.activation = Activation::gelu;
  s.aggregation = Aggregation::dense_spatial;
  return s;
}

template <typename T>
MixerSpec<T> ffnified_spec(const FFNifiedParams<T>& p) {
  if (!(p.keys.geometry == p.values.geometry)) throw ConfigError("keys and values must share geometry");
  MixerSpec<T> s;
  s.query_projection = QueryProjection::pointwise_linear;
  s.query_layer = p.proj;
  s.static_kv = StaticKV<T>{p.keys.weight, p.values.weight, p.keys.bias, p.values.bias, p.keys.geometry};
  s.compatibility = Compatibility::depthwise_conv;
  s.activation = Activation::gelu;
  s.aggregation = Aggregation::depthwise_conv;
  return s;
}

template <typename T>
MixerSpec<T> convnext_spec(const ConvNeXtParams<T>& p) {
  const std::size_t c = p.dw.out_channels(), rc = p.expand.out_channels();
  MixerSpec<T> s;
  s.query_projection = QueryProjection::depthwise_conv;
  s.query_layer = p.dw;
  s.query_norm = p.norm;
  s.static_kv = StaticKV<T>{reshape(p.expand.weight, {rc, c}), transpose2d(reshape(p.reduce.weight, {c, rc})),
                            p.expand.bias, p.reduce.bias, {}};
  s.compatibility = Compatibility::token_dot_product;
  s.activation = Activation::gelu;
  s.aggregation = Aggregation::token_weighted_sum;
  return s;
}

template <typename T>
AttentionParams<T> random_attention(std::size_t d, std::size_t heads, Rng& rng) {
  const T sd = T(1) / std::sqrt(static_cast<T>(d));
  AttentionParams<T> p{randn<T>({d, d}, rng, sd), randn<T>({d, d}, rng, sd), randn<T>({d, d}, rng, sd), heads};
  p.validate();
  return p;
}

template <typename T>
FFNParams<T> random_ffn(std::size_t d, std::size_t d_m, Rng& rng) {
  return FFNParams<T>{randn<T>({d_m, d}, rng, T(1) / std::sqrt(static_cast<T>(d))),
                      randn<T>({d_m, d}, rng, T(1) / std::sqrt(static_cast<T>(d_m))), randn<T>({d_m}, rng, T(0.1)),
                      randn<T>({d}, rng, T(0.1))};
}

template <typename T>
FFNifiedParams<T> random_ffnified(std::size_t c, std::size_t k, Rng& rng, PadFill fill) {
  const ConvGeometry dw{1, Padding::same(k, k, fill), c};
  return FFNifiedParams<T>{
      ConvLayer<T>{randn<T>({c, c, 1, 1}, rng, T(1) / std::sqrt(static_cast<T>(c))), randn<T>({c}, rng, T(0.1)), {}},
      ConvLayer<T>{randn<T>({c, 1, k, k}, rng, T(1) / static_cast<T>(k)), randn<T>({c}, rng, T(0.1)), dw},
      ConvLayer<T>{randn<T>({c, 1, k, k}, rng, T(1) / static_cast<T>(k)), randn<T>({c}, rng, T(0.1)), dw}};
}

template <typename T>
ConvNeXtParams<T> random_convnext(std::size_t c, std::size_t k, std::size_t ratio, Rng& rng) {
  const std::size_t rc = c * ratio;
  BatchNormParams<T> bn;
  bn.gamma = uniform<T>({c}, rng, T(0.5), T(1.5));
  bn.beta = randn<T>({c}, rng, T(0.1));
  bn.running_mean = randn<T>({c}, rng, T(0.1));
  bn.running_var = uniform<T>({c}, rng, T(0.5), T(1.5));
  return ConvNeXtParams<T>{
      ConvLayer<T>{randn<T>({c, 1, k, k}, rng, T(1) / static_cast<T>(k)), randn<T>({c}, rng, T(0.1)),
                   ConvGeometry{1, Padding::same(k, k), c}},
      bn,
      ConvLayer<T>{randn<T>({rc, c, 1, 1}, rng, T(1) / std::sqrt(static_cast<T>(c))), randn<T>({rc}, rng, T(0.1)), {}},
      ConvLayer<T>{randn<T>({c, rc, 1, 1}, rng, T(1) / std::sqrt(static_cast<T>(rc))), randn<T>({c}, rng, T(0.1)),
                   {}}};
}

#define FFNET_INSTANTIATE(T)                                                                                   \
  template struct AttentionParams<T>;                                                                          \
  template struct FFNParams<T>;                                                                                \
  template Tensor<T> self_attention_reference<T>(const Tensor<T>&, const AttentionParams<T>&);                 \
  template Tensor<T> ffn_reference<T>(const Tensor<T>&, const FFNParams<T>&);                                  \
  template Tensor<T> spatial_mlp_reference<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> ffnified_attention_forward<T>(const Tensor<T>&, const FFNifiedParams<T>&);                \
  template Tensor<T> convnext_block_forward<T>(const Tensor<T>&, const ConvNeXtParams<T>&);                    \
  template Mixer<T> build_mixer<T>(MixerSpec<T>);                                                              \
  template Tensor<T> mixer_forward<T>(const Mixer<T>&, const Tensor<T>&);                                      \
  template MixerSpec<T> attention_spec<T>(const AttentionParams<T>&);                                          \
  template MixerSpec<T> ffn_spec<T>(const FFNParams<T>&);                                                      \
  template MixerSpec<T> spatial_mlp_spec<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template MixerSpec<T> ffnified_spec<T>(const FFNifiedParams<T>&);                                            \
  template MixerSpec<T> convnext_spec<T>(const ConvNeXtParams<T>&);                                            \
  template AttentionParams<T> random_attention<T>(std::size_t, std::size_t, Rng&);                             \
  template FFNParams<T> random_ffn<T>(std::size_t, std::size_t, Rng&);                                         \
  template FFNifiedParams<T> random_ffnified<T>(std::size_t, std::size_t, Rng&, PadFill);                      \
  template ConvNeXtParams<T> random_convnext<T>(std::size_t, std::size_t, std::size_t, Rng&);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
