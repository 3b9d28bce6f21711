#pragma once

// Naive 64-bit reference implementations. Nothing here calls the library's
// kernels; each function is written directly from its defining formula.

#include <cmath>
#include <cstddef>
#include <vector>

#include "ffnet/kernels.hpp"
#include "ffnet/tensor.hpp"

namespace oracle {

using ffnet::ConvLayer;
using ffnet::PadFill;
using ffnet::Tensor;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline long wrap(long i, long n) { return ((i % n) + n) % n; }

template <typename T>
Tensor<double> conv2d(const Tensor<T>& x, const ConvLayer<T>& l) {
  const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long OC = l.weight.dim(0), ICg = l.weight.dim(1), KH = l.weight.dim(2), KW = l.weight.dim(3);
  const auto& p = l.geometry.padding;
  const long s = l.geometry.stride, G = l.geometry.groups;
  const long OH = (H + p.top + p.bottom - KH) / s + 1, OW = (W + p.left + p.right - KW) / s + 1;
  const long OCg = OC / G;
  (void)C;
  Tensor<double> out({std::size_t(B), std::size_t(OC), std::size_t(OH), std::size_t(OW)});
  for (long b = 0; b < B; ++b)
    for (long oc = 0; oc < OC; ++oc)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox) {
          double acc = l.bias.empty() ? 0.0 : double(l.bias[oc]);
          const long g = oc / OCg;
          for (long ic = 0; ic < ICg; ++ic)
            for (long ky = 0; ky < KH; ++ky)
              for (long kx = 0; kx < KW; ++kx) {
                long iy = oy * s + ky - long(p.top), ix = ox * s + kx - long(p.left);
                if (p.fill == PadFill::circular) {
                  iy = wrap(iy, H);
                  ix = wrap(ix, W);
                } else if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                  continue;
                }
                const double xv = x[((b * C + g * ICg + ic) * H + iy) * W + ix];
                const double wv = l.weight[((oc * ICg + ic) * KH + ky) * KW + kx];
                acc += xv * wv;
              }
          out[((b * OC + oc) * OH + oy) * OW + ox] = acc;
        }
  return out;
}

template <typename T>
Tensor<double> conv1d(const Tensor<T>& x, const ConvLayer<T>& l) {
  const long B = x.dim(0), C = x.dim(1), N = x.dim(2);
  const long OC = l.weight.dim(0), ICg = l.weight.dim(1), K = l.weight.dim(2);
  const auto& p = l.geometry.padding;
  const long s = l.geometry.stride, G = l.geometry.groups, OCg = OC / G;
  const long ON = (N + p.left + p.right - K) / s + 1;
  Tensor<double> out({std::size_t(B), std::size_t(OC), std::size_t(ON)});
  for (long b = 0; b < B; ++b)
    for (long oc = 0; oc < OC; ++oc)
      for (long o = 0; o < ON; ++o) {
        double acc = l.bias.empty() ? 0.0 : double(l.bias[oc]);
        const long g = oc / OCg;
        for (long ic = 0; ic < ICg; ++ic)
          for (long k = 0; k < K; ++k) {
            long i = o * s + k - long(p.left);
            if (p.fill == PadFill::circular)
              i = wrap(i, N);
            else if (i < 0 || i >= N)
              continue;
            acc += double(x[(b * C + g * ICg + ic) * N + i]) * double(l.weight[(oc * ICg + ic) * K + k]);
          }
        out[(b * OC + oc) * ON + o] = acc;
      }
  return out;
}

/// a [m,k] x b [k,n].
template <typename T>
Tensor<double> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += double(a[i * k + t]) * double(b[t * n + j]);
      out[i * n + j] = acc;
    }
  return out;
}

template <typename T>
Tensor<double> transpose(const Tensor<T>& a) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<double> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

inline void gelu_inplace(Tensor<double>& t) {
  for (auto& v : t.data()) v = oracle::gelu(v);
}

/// Per-head softmax(Q K^T / sqrt(d_h)) V with heads concatenated.
template <typename T>
Tensor<double> attention(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv,
                         std::size_t heads) {
  const Tensor<double> q = oracle::matmul(x, wq), k = oracle::matmul(x, wk), v = oracle::matmul(x, wv);
  const std::size_t n = x.dim(0), d = wq.dim(1), dh = d / heads;
  Tensor<double> out({n, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < dh; ++c) acc += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s[j] = acc / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += s[j] / z * v[j * d + h * dh + c];
        out[i * d + h * dh + c] = acc;
      }
    }
  return out;
}

/// gelu(x W1^T + b1) W2 + b2 with W1, W2 [d_m, d].
template <typename T>
Tensor<double> ffn(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
                   const Tensor<T>& b2) {
  const std::size_t n = x.dim(0), dm = w1.dim(0), d = w1.dim(1);
  Tensor<double> h({n, dm});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dm; ++j) {
      double acc = b1.empty() ? 0.0 : double(b1[j]);
      for (std::size_t t = 0; t < d; ++t) acc += double(x[i * d + t]) * double(w1[j * d + t]);
      h[i * dm + j] = oracle::gelu(acc);
    }
  Tensor<double> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = b2.empty() ? 0.0 : double(b2[j]);
      for (std::size_t t = 0; t < dm; ++t) acc += h[i * dm + t] * double(w2[t * d + j]);
      out[i * d + j] = acc;
    }
  return out;
}

/// Infer-mode batch norm over axis 1 from the closed form.
template <typename T>
Tensor<double> batchnorm(const Tensor<double>& x, const ffnet::BatchNormParams<T>& p) {
  Tensor<double> out = x;
  const std::size_t C = x.dim(1), inner = x.size() / (x.dim(0) * C);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = (i / inner) % C;
    out[i] = (x[i] - double(p.running_mean[c])) * double(p.gamma[c]) /
                 std::sqrt(double(p.running_var[c]) + double(p.epsilon)) +
             double(p.beta[c]);
  }
  return out;
}

/// Dense matrix of a 1x1 grouped conv1d: [out, in], zero outside the
/// diagonal blocks.
template <typename T>
Tensor<double> block_diagonal(const Tensor<T>& weight, std::size_t groups) {
  const std::size_t out = weight.dim(0), in_g = weight.dim(1), in = in_g * groups, out_g = out / groups;
  Tensor<double> m({out, in});
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in_g; ++i) m[o * in + (o / out_g) * in_g + i] = weight[o * in_g + i];
  return m;
}

/// y[b, :, n] = A x[b, :, n] + bias.
inline Tensor<double> apply_dense(const Tensor<double>& a, const Tensor<double>& bias, const Tensor<double>& x) {
  const std::size_t B = x.dim(0), in = x.dim(1), N = x.dim(2), out = a.dim(0);
  Tensor<double> y({B, out, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t n = 0; n < N; ++n) {
        double acc = bias.empty() ? 0.0 : bias[o];
        for (std::size_t i = 0; i < in; ++i) acc += a[o * in + i] * x[(b * in + i) * N + n];
        y[(b * out + o) * N + n] = acc;
      }
  return y;
}

}  // namespace oracle
