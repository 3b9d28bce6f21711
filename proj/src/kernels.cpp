#include "ffnet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ffnet {

Padding Padding::same(std::size_t kh, std::size_t kw, PadFill fill) {
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ConfigError("same padding requires odd kernel sizes, got " + std::to_string(kh) + "x" +
                      std::to_string(kw));
  return Padding{(kh - 1) / 2, (kh - 1) / 2, (kw - 1) / 2, (kw - 1) / 2, fill};
}

Padding Padding::same1d(std::size_t k, PadFill fill) {
  if (k % 2 == 0) throw ConfigError("same padding requires an odd kernel size, got " + std::to_string(k));
  return Padding{0, 0, (k - 1) / 2, (k - 1) / 2, fill};
}

template <typename T>
void ConvLayer<T>::validate() const {
  if (weight.rank() != 3 && weight.rank() != 4)
    throw ShapeError("conv weight must be rank 3 or 4, got " + to_string(weight.shape()));
  if (geometry.groups == 0 || geometry.stride == 0) throw ConfigError("conv groups and stride must be positive");
  if (weight.dim(0) % geometry.groups != 0)
    throw ShapeError("output channels " + std::to_string(weight.dim(0)) + " not divisible by groups " +
                     std::to_string(geometry.groups));
  if (!bias.empty() && bias.shape() != Shape{weight.dim(0)})
    throw ShapeError("conv bias shape " + to_string(bias.shape()) + " does not match outC " +
                     std::to_string(weight.dim(0)));
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels, T epsilon) {
  BatchNormParams p;
  p.gamma = Tensor<T>::ones({channels});
  p.beta = Tensor<T>::zeros({channels});
  p.running_mean = Tensor<T>::zeros({channels});
  p.running_var = Tensor<T>::ones({channels});
  p.epsilon = epsilon;
  return p;
}

template <typename T>
void BatchNormParams<T>::validate() const {
  const Shape c{gamma.size()};
  if (gamma.rank() != 1 || beta.shape() != c || running_mean.shape() != c || running_var.shape() != c)
    throw ShapeError("batchnorm parameter shapes disagree");
  // epsilon == 0 is accepted so that exact identity normalizations can be expressed.
  if (!(epsilon >= T(0))) throw ConfigError("batchnorm epsilon must be nonnegative");
  for (T v : running_var.data())
    if (v < T(0)) throw ConfigError("batchnorm running_var must be nonnegative");
}

std::size_t conv_out_size(std::size_t in, std::size_t pad_total, std::size_t kernel, std::size_t stride) {
  if (in + pad_total < kernel)
    throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + pad_total));
  return (in + pad_total - kernel) / stride + 1;
}

namespace {

// Input positions touched by one kernel offset along one axis.
struct AxisTaps {
  std::size_t lo = 0;  // first valid output index
  std::size_t hi = 0;  // one past the last valid output index
  long first_input = 0;  // input index for output `lo`
  std::vector<long> wrapped;  // circular fill: input index for every output
};

std::vector<AxisTaps> make_axis_taps(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                                     std::size_t pad_before, bool circular) {
  std::vector<AxisTaps> taps(kernel);
  const long n = static_cast<long>(in);
  for (std::size_t k = 0; k < kernel; ++k) {
    AxisTaps& t = taps[k];
    const long shift = static_cast<long>(k) - static_cast<long>(pad_before);
    if (circular) {
      t.lo = 0;
      t.hi = out;
      t.wrapped.resize(out);
      for (std::size_t o = 0; o < out; ++o) {
        long i = static_cast<long>(o * stride) + shift;
        i %= n;
        if (i < 0) i += n;
        t.wrapped[o] = i;
      }
      continue;
    }
    // valid o: 0 <= o*stride + shift < n
    long lo = 0;
    if (shift < 0) lo = (-shift + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long hi = -1;
    if (n - 1 - shift >= 0) hi = (n - 1 - shift) / static_cast<long>(stride);
    hi = std::min(hi, static_cast<long>(out) - 1);
    if (hi < lo) {
      t.lo = t.hi = 0;
    } else {
      t.lo = static_cast<std::size_t>(lo);
      t.hi = static_cast<std::size_t>(hi + 1);
      t.first_input = lo * static_cast<long>(stride) + shift;
    }
  }
  return taps;
}

struct ConvDims {
  std::size_t batch, in_c, in_h, in_w, out_c, out_h, out_w, kh, kw, groups, in_per_group, out_per_group, stride;
  bool circular;
  bool pointwise;  // 1x1, stride 1, unpadded
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, const ConvGeometry& g) {
  if (xs.size() != 4) throw ShapeError("conv2d input must be [B,C,H,W], got " + to_string(xs));
  if (ws.size() != 4) throw ShapeError("conv2d weight must be [O,C/g,kH,kW], got " + to_string(ws));
  if (g.groups == 0 || g.stride == 0) throw ConfigError("conv groups and stride must be positive");
  ConvDims d{};
  d.batch = xs[0];
  d.in_c = xs[1];
  d.in_h = xs[2];
  d.in_w = xs[3];
  d.out_c = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  d.groups = g.groups;
  d.stride = g.stride;
  if (d.in_c % d.groups != 0)
    throw ShapeError("input channels " + std::to_string(d.in_c) + " not divisible by groups " +
                     std::to_string(d.groups));
  if (d.out_c % d.groups != 0)
    throw ShapeError("output channels " + std::to_string(d.out_c) + " not divisible by groups " +
                     std::to_string(d.groups));
  d.in_per_group = d.in_c / d.groups;
  d.out_per_group = d.out_c / d.groups;
  if (ws[1] != d.in_per_group)
    throw ShapeError("weight expects " + std::to_string(ws[1] * d.groups) + " input channels, input has " +
                     std::to_string(d.in_c));
  const Padding& p = g.padding;
  d.out_h = conv_out_size(d.in_h, p.top + p.bottom, d.kh, d.stride);
  d.out_w = conv_out_size(d.in_w, p.left + p.right, d.kw, d.stride);
  d.circular = p.fill == PadFill::circular;
  d.pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && p.top == 0 && p.bottom == 0 && p.left == 0 &&
                p.right == 0;
  return d;
}

// Visits every (output pixel, input pixel) pair for one kernel tap:
// fn(out_offset, in_offset) with offsets into the respective planes.
template <typename Fn>
inline void for_each_tap_pair(const ConvDims& d, const AxisTaps& th, const AxisTaps& tw, Fn&& fn) {
  if (d.circular) {
    for (std::size_t oh = 0; oh < d.out_h; ++oh) {
      const std::size_t ih = static_cast<std::size_t>(th.wrapped[oh]);
      for (std::size_t ow = 0; ow < d.out_w; ++ow)
        fn(oh * d.out_w + ow, ih * d.in_w + static_cast<std::size_t>(tw.wrapped[ow]));
    }
    return;
  }
  if (th.hi <= th.lo || tw.hi <= tw.lo) return;
  for (std::size_t oh = th.lo; oh < th.hi; ++oh) {
    const std::size_t ih = static_cast<std::size_t>(th.first_input) + (oh - th.lo) * d.stride;
    const std::size_t ob = oh * d.out_w;
    const std::size_t ib = ih * d.in_w + static_cast<std::size_t>(tw.first_input);
    const std::size_t cnt = tw.hi - tw.lo;
    if (d.stride == 1) {
      for (std::size_t j = 0; j < cnt; ++j) fn(ob + tw.lo + j, ib + j);
    } else {
      for (std::size_t j = 0; j < cnt; ++j) fn(ob + tw.lo + j, ib + j * d.stride);
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, const ConvGeometry& geom) {
  const ConvDims d = conv_dims(x.shape(), weight.shape(), geom);
  if (bias && bias->shape() != Shape{d.out_c})
    throw ShapeError("conv bias shape " + to_string(bias->shape()) + " does not match outC");
  Tensor<T> out({d.batch, d.out_c, d.out_h, d.out_w});
  const std::size_t in_plane = d.in_h * d.in_w;
  const std::size_t out_plane = d.out_h * d.out_w;
  const auto th = make_axis_taps(d.in_h, d.out_h, d.kh, d.stride, geom.padding.top, d.circular);
  const auto tw = make_axis_taps(d.in_w, d.out_w, d.kw, d.stride, geom.padding.left, d.circular);
  const T* xp = x.ptr();
  const T* wp = weight.ptr();
  T* op = out.ptr();
  std::vector<double> acc(out_plane);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t oc = 0; oc < d.out_c; ++oc) {
      T* o = op + (b * d.out_c + oc) * out_plane;
      std::fill(acc.begin(), acc.end(), bias ? double((*bias)[oc]) : 0.0);
      double* a = acc.data();
      const std::size_t g = oc / d.out_per_group;
      for (std::size_t icl = 0; icl < d.in_per_group; ++icl) {
        const std::size_t ic = g * d.in_per_group + icl;
        const T* xi = xp + (b * d.in_c + ic) * in_plane;
        const T* wk = wp + (oc * d.in_per_group + icl) * d.kh * d.kw;
        if (d.pointwise) {
          const double wv = wk[0];
          for (std::size_t p = 0; p < out_plane; ++p) a[p] += wv * double(xi[p]);
          continue;
        }
        for (std::size_t kh = 0; kh < d.kh; ++kh)
          for (std::size_t kw = 0; kw < d.kw; ++kw) {
            const double wv = wk[kh * d.kw + kw];
            for_each_tap_pair(d, th[kh], tw[kw], [&](std::size_t oo, std::size_t io) { a[oo] += wv * double(xi[io]); });
          }
      }
      std::copy(acc.begin(), acc.end(), o);
    }
  }
  check_finite(out, "conv2d");
  return out;
}

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& grad_out, const Tensor<T>& weight, const Shape& input_shape,
                            const ConvGeometry& geom) {
  const ConvDims d = conv_dims(input_shape, weight.shape(), geom);
  if (grad_out.shape() != Shape{d.batch, d.out_c, d.out_h, d.out_w})
    throw ShapeError("conv2d grad_out shape mismatch " + to_string(grad_out.shape()));
  Tensor<T> gx(input_shape);
  const std::size_t in_plane = d.in_h * d.in_w;
  const std::size_t out_plane = d.out_h * d.out_w;
  const auto th = make_axis_taps(d.in_h, d.out_h, d.kh, d.stride, geom.padding.top, d.circular);
  const auto tw = make_axis_taps(d.in_w, d.out_w, d.kw, d.stride, geom.padding.left, d.circular);
  const T* gp = grad_out.ptr();
  const T* wp = weight.ptr();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t ic = 0; ic < d.in_c; ++ic) {
      T* gi = gx.ptr() + (b * d.in_c + ic) * in_plane;
      const std::size_t g = ic / d.in_per_group;
      const std::size_t icl = ic % d.in_per_group;
      for (std::size_t ocl = 0; ocl < d.out_per_group; ++ocl) {
        const std::size_t oc = g * d.out_per_group + ocl;
        const T* go = gp + (b * d.out_c + oc) * out_plane;
        const T* wk = wp + (oc * d.in_per_group + icl) * d.kh * d.kw;
        if (d.pointwise) {
          const T wv = wk[0];
          for (std::size_t p = 0; p < out_plane; ++p) gi[p] += wv * go[p];
          continue;
        }
        for (std::size_t kh = 0; kh < d.kh; ++kh)
          for (std::size_t kw = 0; kw < d.kw; ++kw) {
            const T wv = wk[kh * d.kw + kw];
            for_each_tap_pair(d, th[kh], tw[kw], [&](std::size_t oo, std::size_t io) { gi[io] += wv * go[oo]; });
          }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& grad_out, const Tensor<T>& x, const Shape& weight_shape,
                             const ConvGeometry& geom) {
  const ConvDims d = conv_dims(x.shape(), weight_shape, geom);
  if (grad_out.shape() != Shape{d.batch, d.out_c, d.out_h, d.out_w})
    throw ShapeError("conv2d grad_out shape mismatch " + to_string(grad_out.shape()));
  Tensor<T> gw(weight_shape);
  const std::size_t in_plane = d.in_h * d.in_w;
  const std::size_t out_plane = d.out_h * d.out_w;
  const auto th = make_axis_taps(d.in_h, d.out_h, d.kh, d.stride, geom.padding.top, d.circular);
  const auto tw = make_axis_taps(d.in_w, d.out_w, d.kw, d.stride, geom.padding.left, d.circular);
  for (std::size_t oc = 0; oc < d.out_c; ++oc) {
    const std::size_t g = oc / d.out_per_group;
    for (std::size_t icl = 0; icl < d.in_per_group; ++icl) {
      const std::size_t ic = g * d.in_per_group + icl;
      T* wk = gw.ptr() + (oc * d.in_per_group + icl) * d.kh * d.kw;
      for (std::size_t b = 0; b < d.batch; ++b) {
        const T* go = grad_out.ptr() + (b * d.out_c + oc) * out_plane;
        const T* xi = x.ptr() + (b * d.in_c + ic) * in_plane;
        if (d.pointwise) {
          T acc = 0;
          for (std::size_t p = 0; p < out_plane; ++p) acc += go[p] * xi[p];
          wk[0] += acc;
          continue;
        }
        for (std::size_t kh = 0; kh < d.kh; ++kh)
          for (std::size_t kw = 0; kw < d.kw; ++kw) {
            T acc = 0;
            for_each_tap_pair(d, th[kh], tw[kw], [&](std::size_t oo, std::size_t io) { acc += go[oo] * xi[io]; });
            wk[kh * d.kw + kw] += acc;
          }
      }
    }
  }
  return gw;
}

namespace {

template <typename T>
void validate_layer_for_input(const Tensor<T>& x, const ConvLayer<T>& layer, std::size_t rank) {
  if (x.rank() != rank)
    throw ShapeError("conv input must have rank " + std::to_string(rank) + ", got " + to_string(x.shape()));
  if (layer.weight.rank() != rank)
    throw ShapeError("conv weight must have rank " + std::to_string(rank) + ", got " +
                     to_string(layer.weight.shape()));
  layer.validate();
  if (x.dim(1) != layer.in_channels())
    throw ShapeError("input has " + std::to_string(x.dim(1)) + " channels, layer expects " +
                     std::to_string(layer.in_channels()));
}

}  // namespace

template <typename T>
Tensor<T> grouped_conv2d(const Tensor<T>& x, const ConvLayer<T>& layer) {
  validate_layer_for_input(x, layer, 4);
  return conv2d(x, layer.weight, layer.bias.empty() ? nullptr : &layer.bias, layer.geometry);
}

template <typename T>
Tensor<T> grouped_conv1d(const Tensor<T>& x, const ConvLayer<T>& layer) {
  validate_layer_for_input(x, layer, 3);
  const Shape& ws = layer.weight.shape();
  ConvGeometry g = layer.geometry;
  g.padding.top = g.padding.bottom = 0;
  Tensor<T> x4 = reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2)});
  Tensor<T> w4 = reshape(layer.weight, {ws[0], ws[1], 1, ws[2]});
  Tensor<T> y = conv2d(x4, w4, layer.bias.empty() ? nullptr : &layer.bias, g);
  return reshape(std::move(y), {y.dim(0), y.dim(1), y.dim(3)});
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvLayer<T>& layer) {
  if (!layer.is_depthwise()) throw ShapeError("depthwise_conv2d requires groups == inC == outC");
  return grouped_conv2d(x, layer);
}

// ---- linear algebra ------------------------------------------------------

namespace {

template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul operands must have rank >= 2");
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2)
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (!lead_b.empty() && lead_a != lead_b)
    throw ShapeError("matmul batch dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t batch = numel(lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> c(out_shape);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* bp = lead_b.empty() ? b.ptr() : b.ptr() + bi * k * n;
    gemm_acc(a.ptr() + bi * m * k, bp, c.ptr() + bi * m * n, m, k, n);
  }
  check_finite(c, "matmul");
  return c;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d expects rank 2, got " + to_string(a.shape()));
  return permute(a, {1, 0});
}

// ---- elementwise ---------------------------------------------------------

namespace {

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + " shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = f(a[i], b[i]);
  check_finite(c, name);
  return c;
}

// outer x axis x inner decomposition for broadcasting along one axis
struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "mul", [](T x, T y) { return x * y; });
}
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] * s;
  check_finite(c, "scale");
  return c;
}

template <typename T>
Tensor<T> add_along(const Tensor<T>& x, const Tensor<T>& b, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (b.size() != s.len) throw ShapeError("add_along: bias length does not match axis size");
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l) {
      const std::size_t base = (o * s.len + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) y[base + i] = x[base + i] + b[l];
    }
  check_finite(y, "add_along");
  return y;
}

template <typename T>
Tensor<T> mul_along(const Tensor<T>& x, const Tensor<T>& g, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (g.size() != s.len) throw ShapeError("mul_along: scale length does not match axis size");
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l) {
      const std::size_t base = (o * s.len + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) y[base + i] = x[base + i] * g[l];
    }
  check_finite(y, "mul_along");
  return y;
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  check_finite(y, "gelu");
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  check_finite(y, "relu");
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = x[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner]);
      T total = 0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(x[base + l * s.inner] - mx);
        y[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] /= total;
    }
  check_finite(y, "softmax");
  return y;
}

// ---- normalization -------------------------------------------------------

namespace {

template <typename T>
AxisSplit bn_split(const Tensor<T>& x, const BatchNormParams<T>& p) {
  if (x.rank() < 2) throw ShapeError("batchnorm input must be [B,C,...], got " + to_string(x.shape()));
  p.validate();
  if (x.dim(1) != p.channels())
    throw ShapeError("batchnorm expects " + std::to_string(p.channels()) + " channels, input has " +
                     std::to_string(x.dim(1)));
  return split_axis(x.shape(), 1);
}

}  // namespace

template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const BatchNormParams<T>& p) {
  const AxisSplit s = bn_split(x, p);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < s.len; ++c) {
    const T inv = p.gamma[c] / std::sqrt(p.running_var[c] + p.epsilon);
    const T shift = p.beta[c] - p.running_mean[c] * inv;
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t base = (o * s.len + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) y[base + i] = x[base + i] * inv + shift;
    }
  }
  check_finite(y, "batchnorm_infer");
  return y;
}

template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, BatchNormParams<T>& p) {
  const AxisSplit s = bn_split(x, p);
  const std::size_t count = s.outer * s.inner;
  if (count < 2) throw ShapeError("batchnorm train mode needs at least 2 values per channel");
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < s.len; ++c) {
    double m = 0;
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t base = (o * s.len + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) m += x[base + i];
    }
    m /= static_cast<double>(count);
    double v = 0;
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t base = (o * s.len + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) v += (x[base + i] - m) * (x[base + i] - m);
    }
    v /= static_cast<double>(count);
    const T inv = static_cast<T>(1.0 / std::sqrt(v + p.epsilon));
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t base = (o * s.len + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i)
        y[base + i] = (x[base + i] - static_cast<T>(m)) * inv * p.gamma[c] + p.beta[c];
    }
    const T unbiased = static_cast<T>(v * static_cast<double>(count) / static_cast<double>(count - 1));
    p.running_mean[c] = (T(1) - p.momentum) * p.running_mean[c] + p.momentum * static_cast<T>(m);
    p.running_var[c] = (T(1) - p.momentum) * p.running_var[c] + p.momentum * unbiased;
  }
  check_finite(y, "batchnorm_train");
  return y;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p, NormMode mode) {
  return mode == NormMode::train ? batchnorm_train(x, p) : batchnorm_infer(x, p);
}

// ---- reductions ----------------------------------------------------------

template <typename T>
T sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return s;
}

template <typename T>
T mean(const Tensor<T>& x) {
  if (x.empty()) throw ShapeError("mean of empty tensor");
  return sum(x) / static_cast<T>(x.size());
}

// ---- layout --------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel(shape) != x.size())
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  return Tensor<T>(shape, x.vec());
}

template <typename T>
Tensor<T> reshape(Tensor<T>&& x, const Shape& shape) {
  if (numel(shape) != x.size())
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  return Tensor<T>(shape, x.release());
}

Shape permuted_shape(const Shape& shape, const std::vector<std::size_t>& perm) {
  if (perm.size() != shape.size()) throw ShapeError("permutation rank mismatch for " + to_string(shape));
  std::vector<bool> seen(perm.size(), false);
  Shape out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw ShapeError("invalid permutation");
    seen[perm[i]] = true;
    out[i] = shape[perm[i]];
  }
  return out;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape out_shape = permuted_shape(x.shape(), perm);
  const std::size_t r = x.rank();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // stride in the input for each output axis
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) strides[i] = in_strides[perm[i]];
  Tensor<T> y(out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  const std::size_t n = y.size();
  for (std::size_t dst = 0; dst < n; ++dst) {
    y[dst] = x[src];
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      src += strides[a];
      if (idx[a] < out_shape[a]) break;
      src -= strides[a] * out_shape[a];
      idx[a] = 0;
    }
  }
  return y;
}

template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::size_t>& before, const std::vector<std::size_t>& after) {
  const std::size_t r = x.rank();
  if (before.size() != r || after.size() != r) throw ShapeError("pad amounts must match tensor rank");
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(i) + before[i] + after[i];
  Tensor<T> y(out_shape);
  std::vector<std::size_t> out_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t src = 0; src < x.size(); ++src) {
    std::size_t dst = 0;
    for (std::size_t a = 0; a < r; ++a) dst += (idx[a] + before[a]) * out_strides[a];
    y[dst] = x[src];
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < x.dim(a)) break;
      idx[a] = 0;
    }
  }
  return y;
}

template <typename T>
Tensor<T> unpad(const Tensor<T>& x, const std::vector<std::size_t>& before, const std::vector<std::size_t>& after) {
  const std::size_t r = x.rank();
  if (before.size() != r || after.size() != r) throw ShapeError("unpad amounts must match tensor rank");
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (x.dim(i) <= before[i] + after[i]) throw ShapeError("unpad removes the whole axis");
    out_shape[i] = x.dim(i) - before[i] - after[i];
  }
  Tensor<T> y(out_shape);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t dst = 0; dst < y.size(); ++dst) {
    std::size_t src = 0;
    for (std::size_t a = 0; a < r; ++a) src += (idx[a] + before[a]) * in_strides[a];
    y[dst] = x[src];
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < out_shape[a]) break;
      idx[a] = 0;
    }
  }
  return y;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x, std::size_t start_axis) {
  if (start_axis >= x.rank()) throw ShapeError("flatten start axis out of range");
  Shape s(x.shape().begin(), x.shape().begin() + static_cast<long>(start_axis));
  std::size_t tail = 1;
  for (std::size_t i = start_axis; i < x.rank(); ++i) tail *= x.dim(i);
  s.push_back(tail);
  return reshape(x, s);
}

#define FFNET_INSTANTIATE(T)                                                                              \
  template struct ConvLayer<T>;                                                                           \
  template struct BatchNormParams<T>;                                                                     \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, const ConvGeometry&); \
  template Tensor<T> conv2d_input_grad<T>(const Tensor<T>&, const Tensor<T>&, const Shape&,              \
                                          const ConvGeometry&);                                           \
  template Tensor<T> conv2d_weight_grad<T>(const Tensor<T>&, const Tensor<T>&, const Shape&,             \
                                           const ConvGeometry&);                                          \
  template Tensor<T> grouped_conv2d<T>(const Tensor<T>&, const ConvLayer<T>&);                           \
  template Tensor<T> grouped_conv1d<T>(const Tensor<T>&, const ConvLayer<T>&);                           \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const ConvLayer<T>&);                         \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> transpose2d<T>(const Tensor<T>&);                                                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                      \
  template Tensor<T> add_along<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                      \
  template Tensor<T> mul_along<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                      \
  template T gelu_scalar<T>(T);                                                                           \
  template T gelu_grad_scalar<T>(T);                                                                      \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                          \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                          \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> batchnorm_infer<T>(const Tensor<T>&, const BatchNormParams<T>&);                    \
  template Tensor<T> batchnorm_train<T>(const Tensor<T>&, BatchNormParams<T>&);                          \
  template Tensor<T> batchnorm<T>(const Tensor<T>&, BatchNormParams<T>&, NormMode);                      \
  template T sum<T>(const Tensor<T>&);                                                                    \
  template T mean<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                         \
  template Tensor<T> reshape<T>(Tensor<T>&&, const Shape&);                                              \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);                      \
  template Tensor<T> pad<T>(const Tensor<T>&, const std::vector<std::size_t>&, const std::vector<std::size_t>&); \
  template Tensor<T> unpad<T>(const Tensor<T>&, const std::vector<std::size_t>&,                         \
                              const std::vector<std::size_t>&);                                           \
  template Tensor<T> flatten<T>(const Tensor<T>&, std::size_t);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
