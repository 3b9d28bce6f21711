#include "ffnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace ffnet::ad {

template <typename T>
Var<T> Var<T>::leaf(Tensor<T> value, bool requires_grad, std::string name) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return Var(std::move(n));
}

template <typename T>
Tensor<T>& Var<T>::mutable_value() {
  if (!node_->is_leaf()) throw Error("mutable_value is only available on leaves");
  return node_->value;
}

template <typename T>
void GradientMap<T>::accumulate(const Node<T>* leaf, Tensor<T> g) {
  auto it = grads_.find(leaf);
  if (it == grads_.end()) {
    grads_.emplace(leaf, std::move(g));
    return;
  }
  Tensor<T>& acc = it->second;
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

template <typename T>
Tensor<T> GradientMap<T>::get(const Var<T>& v) const {
  auto it = grads_.find(v.node());
  if (it == grads_.end()) return Tensor<T>(v.shape());
  return it->second;
}

template <typename T>
Tape<T> Tape<T>::record(const Var<T>& root) {
  Tape tape;
  tape.root_ = root;
  if (!root.defined()) throw Error("cannot record an undefined variable");
  std::unordered_set<const Node<T>*> visited;
  // iterative post-order DFS
  std::vector<std::pair<NodePtr<T>, std::size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node_ptr(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const NodePtr<T>& in = node->inputs[next++];
      if (in->requires_grad && visited.insert(in.get()).second) stack.emplace_back(in, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
GradientMap<T> Tape<T>::backward(const Tensor<T>& seed) const {
  if (seed.shape() != root_.shape())
    throw ShapeError("seed shape " + to_string(seed.shape()) + " does not match output shape " +
                     to_string(root_.shape()));
  GradientMap<T> result;
  if (order_.empty()) return result;
  std::unordered_map<const Node<T>*, Tensor<T>> grads;
  grads.emplace(root_.node(), seed);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const Node<T>& node = **it;
    auto git = grads.find(&node);
    if (git == grads.end()) continue;
    Tensor<T> g = std::move(git->second);
    grads.erase(git);
    if (node.is_leaf()) {
      result.accumulate(&node, std::move(g));
      continue;
    }
    if (!node.backward) throw Error("op '" + node.op + "' has no registered backward rule");
    std::vector<Tensor<T>> gin = node.backward(node, g);
    if (gin.size() != node.inputs.size())
      throw Error("backward rule of '" + node.op + "' returned the wrong number of gradients");
    for (std::size_t i = 0; i < gin.size(); ++i) {
      const Node<T>* in = node.inputs[i].get();
      if (!in->requires_grad || gin[i].empty()) continue;
      if (gin[i].shape() != in->value.shape())
        throw ShapeError("backward rule of '" + node.op + "' produced gradient " + to_string(gin[i].shape()) +
                         " for input " + to_string(in->value.shape()));
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        grads.emplace(in, std::move(gin[i]));
      } else {
        Tensor<T>& acc = slot->second;
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += gin[i][k];
      }
    }
  }
  return result;
}

template <typename T>
GradientMap<T> backward(const Var<T>& root, const Tensor<T>& seed) {
  return Tape<T>::record(root).backward(seed);
}

template <typename T>
GradientMap<T> backward(const Var<T>& root) {
  return backward(root, Tensor<T>::ones(root.shape()));
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Var<T> make_op(std::string op, std::vector<Var<T>> inputs, Tensor<T> value, BackwardFn<T> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  for (const auto& in : inputs) {
    if (!in.defined()) throw Error("op '" + n->op + "' received an undefined input");
    n->requires_grad = n->requires_grad || in.requires_grad();
  }
  if (!g_grad_enabled) n->requires_grad = false;
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

namespace {

template <typename T>
const Tensor<T>& in(const Node<T>& self, std::size_t i) {
  return self.inputs[i]->value;
}

template <typename T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.inputs[i]->requires_grad;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& t) {
  std::vector<std::size_t> perm(t.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[t.rank() - 1], perm[t.rank() - 2]);
  return ffnet::permute(t, perm);
}

// Sums t over every axis except `axis`.
template <typename T>
Tensor<T> reduce_to_axis(const Tensor<T>& t, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  const std::size_t len = t.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
  Tensor<T> r({len});
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l) {
      const std::size_t base = (o * len + l) * inner;
      T s = 0;
      for (std::size_t i = 0; i < inner; ++i) s += t[base + i];
      r[l] += s;
    }
  return r;
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("add", {a, b}, ffnet::add(a.value(), b.value()),
                    [](const Node<T>&, const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("sub", {a, b}, ffnet::sub(a.value(), b.value()), [](const Node<T>&, const Tensor<T>& g) {
    return std::vector<Tensor<T>>{g, ffnet::scale(g, T(-1))};
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("mul", {a, b}, ffnet::mul(a.value(), b.value()), [](const Node<T>& self, const Tensor<T>& g) {
    return std::vector<Tensor<T>>{wants(self, 0) ? ffnet::mul(g, in(self, 1)) : Tensor<T>{},
                                  wants(self, 1) ? ffnet::mul(g, in(self, 0)) : Tensor<T>{}};
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return make_op<T>("scale", {a}, ffnet::scale(a.value(), s), [s](const Node<T>&, const Tensor<T>& g) {
    return std::vector<Tensor<T>>{ffnet::scale(g, s)};
  });
}

template <typename T>
Var<T> bias_add(const Var<T>& x, const Var<T>& b, std::size_t axis) {
  return make_op<T>("bias_add", {x, b}, add_along(x.value(), b.value(), axis),
                    [axis](const Node<T>& self, const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{
                          g, wants(self, 1) ? reshape(reduce_to_axis(g, axis), in(self, 1).shape()) : Tensor<T>{}};
                    });
}

template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& s, std::size_t axis) {
  return make_op<T>("channel_scale", {x, s}, mul_along(x.value(), s.value(), axis),
                    [axis](const Node<T>& self, const Tensor<T>& g) {
                      Tensor<T> gx = wants(self, 0) ? mul_along(g, in(self, 1), axis) : Tensor<T>{};
                      Tensor<T> gs;
                      if (wants(self, 1))
                        gs = reshape(reduce_to_axis(ffnet::mul(g, in(self, 0)), axis), in(self, 1).shape());
                      return std::vector<Tensor<T>>{std::move(gx), std::move(gs)};
                    });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("matmul", {a, b}, ffnet::matmul(a.value(), b.value()),
                    [](const Node<T>& self, const Tensor<T>& g) {
                      const Tensor<T>& av = in(self, 0);
                      const Tensor<T>& bv = in(self, 1);
                      Tensor<T> ga, gb;
                      if (wants(self, 0)) ga = ffnet::matmul(g, transpose_last2(bv));
                      if (wants(self, 1)) {
                        if (bv.rank() == 2 && av.rank() > 2) {
                          const std::size_t k = av.dim(av.rank() - 1);
                          const std::size_t n = g.dim(g.rank() - 1);
                          Tensor<T> a2 = reshape(av, {av.size() / k, k});
                          Tensor<T> g2 = reshape(g, {g.size() / n, n});
                          gb = ffnet::matmul(transpose2d(a2), g2);
                        } else {
                          gb = ffnet::matmul(transpose_last2(av), g);
                        }
                      }
                      return std::vector<Tensor<T>>{std::move(ga), std::move(gb)};
                    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geom) {
  const bool has_bias = bias.defined();
  Tensor<T> y = ffnet::conv2d(x.value(), weight.value(), has_bias ? &bias.value() : nullptr, geom);
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op<T>("conv2d", std::move(inputs), std::move(y), [geom](const Node<T>& self, const Tensor<T>& g) {
    std::vector<Tensor<T>> out(self.inputs.size());
    if (wants(self, 0)) out[0] = conv2d_input_grad(g, in(self, 1), in(self, 0).shape(), geom);
    if (wants(self, 1)) out[1] = conv2d_weight_grad(g, in(self, 0), in(self, 1).shape(), geom);
    if (self.inputs.size() == 3 && wants(self, 2)) out[2] = reduce_to_axis(g, 1);
    return out;
  });
}

template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geom) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 3) throw ShapeError("conv1d input must be [B,C,N], got " + to_string(xs));
  if (ws.size() != 3) throw ShapeError("conv1d weight must be [O,C/g,k], got " + to_string(ws));
  ConvGeometry g2 = geom;
  g2.padding.top = g2.padding.bottom = 0;
  const Shape x4{xs[0], xs[1], 1, xs[2]};
  const Shape w4{ws[0], ws[1], 1, ws[2]};
  const bool has_bias = bias.defined();
  Tensor<T> y = ffnet::conv2d(ffnet::reshape(x.value(), x4), ffnet::reshape(weight.value(), w4),
                              has_bias ? &bias.value() : nullptr, g2);
  const Shape ys{y.dim(0), y.dim(1), y.dim(3)};
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op<T>("conv1d", std::move(inputs), ffnet::reshape(std::move(y), ys),
                    [g2, x4, w4](const Node<T>& self, const Tensor<T>& g) {
                      const Tensor<T> g4 = ffnet::reshape(g, {g.dim(0), g.dim(1), 1, g.dim(2)});
                      std::vector<Tensor<T>> out(self.inputs.size());
                      if (wants(self, 0))
                        out[0] = ffnet::reshape(conv2d_input_grad(g4, ffnet::reshape(in(self, 1), w4), x4, g2),
                                                in(self, 0).shape());
                      if (wants(self, 1))
                        out[1] = ffnet::reshape(conv2d_weight_grad(g4, ffnet::reshape(in(self, 0), x4), w4, g2),
                                                in(self, 1).shape());
                      if (self.inputs.size() == 3 && wants(self, 2)) out[2] = reduce_to_axis(g, 1);
                      return out;
                    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  return make_op<T>("gelu", {x}, ffnet::gelu(x.value()), [](const Node<T>& self, const Tensor<T>& g) {
    const Tensor<T>& xv = in(self, 0);
    Tensor<T> gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] * gelu_grad_scalar(xv[i]);
    return std::vector<Tensor<T>>{std::move(gx)};
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return make_op<T>("relu", {x}, ffnet::relu(x.value()), [](const Node<T>& self, const Tensor<T>& g) {
    const Tensor<T>& xv = in(self, 0);
    Tensor<T> gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = xv[i] > T(0) ? g[i] : T(0);
    return std::vector<Tensor<T>>{std::move(gx)};
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  return make_op<T>("softmax", {x}, ffnet::softmax(x.value(), axis), [axis](const Node<T>& self, const Tensor<T>& g) {
    const Tensor<T>& y = self.value;
    std::size_t outer = 1, inner = 1;
    const std::size_t len = y.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= y.dim(i);
    for (std::size_t i = axis + 1; i < y.rank(); ++i) inner *= y.dim(i);
    Tensor<T> gx(y.shape());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l)
          gx[base + l * inner] = y[base + l * inner] * (g[base + l * inner] - dot);
      }
    return std::vector<Tensor<T>>{std::move(gx)};
  });
}

namespace {

struct ChannelLayout {
  std::size_t outer, channels, inner;
};

template <typename T>
ChannelLayout channel_layout(const Tensor<T>& x, std::size_t channels) {
  if (x.rank() < 2) throw ShapeError("batchnorm input must be [B,C,...], got " + to_string(x.shape()));
  if (x.dim(1) != channels)
    throw ShapeError("batchnorm expects " + std::to_string(channels) + " channels, input has " +
                     std::to_string(x.dim(1)));
  ChannelLayout l{x.dim(0), channels, 1};
  for (std::size_t i = 2; i < x.rank(); ++i) l.inner *= x.dim(i);
  return l;
}

}  // namespace

template <typename T>
Var<T> batchnorm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Tensor<T>& running_mean,
                       const Tensor<T>& running_var, T epsilon) {
  BatchNormParams<T> p{gamma.value(), beta.value(), running_mean, running_var, epsilon, T(0.1)};
  Tensor<T> y = ffnet::batchnorm_infer(x.value(), p);
  const std::size_t c = gamma.value().size();
  std::vector<T> inv_std(c), mu(c);
  for (std::size_t i = 0; i < c; ++i) {
    inv_std[i] = T(1) / std::sqrt(running_var[i] + epsilon);
    mu[i] = running_mean[i];
  }
  return make_op<T>("batchnorm_infer", {x, gamma, beta}, std::move(y),
                    [inv_std, mu](const Node<T>& self, const Tensor<T>& g) {
                      const Tensor<T>& xv = in(self, 0);
                      const Tensor<T>& gm = in(self, 1);
                      const ChannelLayout l = channel_layout(xv, gm.size());
                      Tensor<T> gx(xv.shape()), gg(gm.shape()), gb(gm.shape());
                      for (std::size_t o = 0; o < l.outer; ++o)
                        for (std::size_t ch = 0; ch < l.channels; ++ch) {
                          const std::size_t base = (o * l.channels + ch) * l.inner;
                          const T k = gm[ch] * inv_std[ch];
                          for (std::size_t i = 0; i < l.inner; ++i) {
                            const T gv = g[base + i];
                            gx[base + i] = gv * k;
                            gg[ch] += gv * (xv[base + i] - mu[ch]) * inv_std[ch];
                            gb[ch] += gv;
                          }
                        }
                      return std::vector<Tensor<T>>{std::move(gx), std::move(gg), std::move(gb)};
                    });
}

template <typename T>
Var<T> batchnorm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, T epsilon, T momentum) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = gamma.value().size();
  const ChannelLayout l = channel_layout(xv, c);
  const std::size_t count = l.outer * l.inner;
  if (count < 2) throw ShapeError("batchnorm train mode needs at least 2 values per channel");
  if (running_mean.size() != c || running_var.size() != c) throw ShapeError("running statistics size mismatch");
  std::vector<T> mu(c), inv_std(c);
  Tensor<T> y(xv.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m = 0, v = 0;
    for (std::size_t o = 0; o < l.outer; ++o) {
      const std::size_t base = (o * l.channels + ch) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) m += xv[base + i];
    }
    m /= static_cast<double>(count);
    for (std::size_t o = 0; o < l.outer; ++o) {
      const std::size_t base = (o * l.channels + ch) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) v += (xv[base + i] - m) * (xv[base + i] - m);
    }
    v /= static_cast<double>(count);
    mu[ch] = static_cast<T>(m);
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + epsilon));
    const T gm = gamma.value()[ch], bt = beta.value()[ch];
    for (std::size_t o = 0; o < l.outer; ++o) {
      const std::size_t base = (o * l.channels + ch) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) y[base + i] = (xv[base + i] - mu[ch]) * inv_std[ch] * gm + bt;
    }
    const double unbiased = v * static_cast<double>(count) / static_cast<double>(count - 1);
    running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mu[ch];
    running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * static_cast<T>(unbiased);
  }
  check_finite(y, "batchnorm_train");
  return make_op<T>("batchnorm_train", {x, gamma, beta}, std::move(y),
                    [mu, inv_std, l, count](const Node<T>& self, const Tensor<T>& g) {
                      const Tensor<T>& xv = in(self, 0);
                      const Tensor<T>& gm = in(self, 1);
                      Tensor<T> gx(xv.shape()), gg(gm.shape()), gb(gm.shape());
                      const T n = static_cast<T>(count);
                      for (std::size_t ch = 0; ch < l.channels; ++ch) {
                        T sum_g = 0, sum_gx = 0;
                        for (std::size_t o = 0; o < l.outer; ++o) {
                          const std::size_t base = (o * l.channels + ch) * l.inner;
                          for (std::size_t i = 0; i < l.inner; ++i) {
                            const T xhat = (xv[base + i] - mu[ch]) * inv_std[ch];
                            sum_g += g[base + i];
                            sum_gx += g[base + i] * xhat;
                          }
                        }
                        gg[ch] = sum_gx;
                        gb[ch] = sum_g;
                        const T k = gm[ch] * inv_std[ch] / n;
                        for (std::size_t o = 0; o < l.outer; ++o) {
                          const std::size_t base = (o * l.channels + ch) * l.inner;
                          for (std::size_t i = 0; i < l.inner; ++i) {
                            const T xhat = (xv[base + i] - mu[ch]) * inv_std[ch];
                            gx[base + i] = k * (n * g[base + i] - sum_g - xhat * sum_gx);
                          }
                        }
                      }
                      return std::vector<Tensor<T>>{std::move(gx), std::move(gg), std::move(gb)};
                    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, const Shape& shape) {
  return make_op<T>("reshape", {x}, ffnet::reshape(x.value(), shape), [](const Node<T>& self, const Tensor<T>& g) {
    return std::vector<Tensor<T>>{ffnet::reshape(g, in(self, 0).shape())};
  });
}

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  return make_op<T>("permute", {x}, ffnet::permute(x.value(), perm), [perm](const Node<T>&, const Tensor<T>& g) {
    return std::vector<Tensor<T>>{ffnet::permute(g, inverse_permutation(perm))};
  });
}

template <typename T>
Var<T> pad(const Var<T>& x, const std::vector<std::size_t>& before, const std::vector<std::size_t>& after) {
  return make_op<T>("pad", {x}, ffnet::pad(x.value(), before, after),
                    [before, after](const Node<T>&, const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{ffnet::unpad(g, before, after)};
                    });
}

template <typename T>
Var<T> flatten(const Var<T>& x, std::size_t start_axis) {
  return make_op<T>("flatten", {x}, ffnet::flatten(x.value(), start_axis),
                    [](const Node<T>& self, const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{ffnet::reshape(g, in(self, 0).shape())};
                    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  return make_op<T>("sum", {x}, Tensor<T>::scalar(ffnet::sum(x.value())),
                    [](const Node<T>& self, const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{Tensor<T>::full(in(self, 0).shape(), g[0])};
                    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return make_op<T>("mean", {x}, Tensor<T>::scalar(ffnet::mean(x.value())),
                    [](const Node<T>& self, const Tensor<T>& g) {
                      const Tensor<T>& xv = in(self, 0);
                      return std::vector<Tensor<T>>{Tensor<T>::full(xv.shape(), g[0] / static_cast<T>(xv.size()))};
                    });
}

template <typename T>
Var<T> mean_trailing(const Var<T>& x, std::size_t start_axis) {
  const Tensor<T>& xv = x.value();
  if (start_axis == 0 || start_axis >= xv.rank()) throw ShapeError("mean_trailing start axis out of range");
  Shape out_shape(xv.shape().begin(), xv.shape().begin() + static_cast<long>(start_axis));
  const std::size_t lead = numel(out_shape);
  const std::size_t count = xv.size() / lead;
  Tensor<T> y(out_shape);
  for (std::size_t i = 0; i < lead; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < count; ++j) s += xv[i * count + j];
    y[i] = s / static_cast<T>(count);
  }
  return make_op<T>("mean_trailing", {x}, std::move(y), [count](const Node<T>& self, const Tensor<T>& g) {
    Tensor<T> gx(in(self, 0).shape());
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * count + j] = g[i] / static_cast<T>(count);
    return std::vector<Tensor<T>>{std::move(gx)};
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 2) throw ShapeError("cross_entropy expects logits [B,K], got " + to_string(z.shape()));
  const std::size_t b = z.dim(0), k = z.dim(1);
  if (labels.size() != b) throw ShapeError("cross_entropy label count does not match batch");
  Tensor<T> probs = ffnet::softmax(z, 1);
  T loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw ShapeError("label out of range");
    T mx = z[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[i * k + j]);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[i * k + j] - mx);
    loss += std::log(s) + mx - z[i * k + static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<T>(b);
  Tensor<T> out = Tensor<T>::scalar(loss);
  check_finite(out, "cross_entropy");
  return make_op<T>("cross_entropy", {logits}, std::move(out),
                    [probs, labels, b, k](const Node<T>&, const Tensor<T>& g) {
                      Tensor<T> gz = probs;
                      for (std::size_t i = 0; i < b; ++i) gz[i * k + static_cast<std::size_t>(labels[i])] -= T(1);
                      const T s = g[0] / static_cast<T>(b);
                      for (auto& v : gz.data()) v *= s;
                      return std::vector<Tensor<T>>{std::move(gz)};
                    });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T p, Rng& rng) {
  if (p < T(0) || p >= T(1)) throw ConfigError("dropout probability must be in [0, 1)");
  Tensor<T> mask = Tensor<T>::ones(x.shape());
  if (p > T(0)) {
    std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
    const T s = T(1) / (T(1) - p);
    for (auto& m : mask.data()) m = keep(rng) ? s : T(0);
  }
  return make_op<T>("dropout", {x}, ffnet::mul(x.value(), mask), [mask](const Node<T>&, const Tensor<T>& g) {
    return std::vector<Tensor<T>>{ffnet::mul(g, mask)};
  });
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  const Tensor<T> diff = ffnet::sub(pred.value(), target.value());
  T s = 0;
  for (T d : diff.data()) s += d * d;
  const T n = static_cast<T>(diff.size());
  return make_op<T>("mse", {pred, target}, Tensor<T>::scalar(s / n),
                    [diff, n](const Node<T>& self, const Tensor<T>& g) {
                      Tensor<T> gp = ffnet::scale(diff, T(2) * g[0] / n);
                      Tensor<T> gt = wants(self, 1) ? ffnet::scale(gp, T(-1)) : Tensor<T>{};
                      return std::vector<Tensor<T>>{std::move(gp), std::move(gt)};
                    });
}

// ---- verification harness ------------------------------------------------

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double h) {
  if (!(h > 0)) throw ConfigError("finite difference step must be positive");
  Tensor<double> probe = x;
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("finite_diff_grad: non-finite function value");
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor, 1e-8});
}

namespace {

double error_floor(const Tensor<double>& analytic) {
  return kRelativeFloor * static_cast<double>(max_abs(analytic));
}

}  // namespace

GradCheckReport grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                           double tol, double h) {
  if (!(tol > 0)) throw ConfigError("grad_check tolerance must be positive");
  Var<double> xv = Var<double>::param(x);
  Var<double> y = f(xv);
  if (y.value().size() != 1) throw ShapeError("grad_check requires a scalar-valued function");
  const Tensor<double> analytic = backward(y).get(xv);
  const Tensor<double> numeric =
      finite_diff_grad([&](const Tensor<double>& t) { return f(Var<double>::constant(t)).value()[0]; }, x, h);
  GradCheckReport r;
  const double floor = error_floor(analytic);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i], floor);
    if (e > r.max_rel_err || i == 0) {
      r.max_rel_err = std::max(r.max_rel_err, e);
      if (e >= r.max_rel_err) r.worst_index = i;
    }
  }
  r.checked = x.size();
  r.pass = r.max_rel_err <= tol;
  return r;
}

GradCheckReport grad_check_params(const std::function<Var<double>()>& loss, const std::vector<Var<double>>& params,
                                  double tol, double h, std::size_t max_coords_per_param, std::uint64_t seed) {
  if (!(tol > 0)) throw ConfigError("grad_check tolerance must be positive");
  Var<double> y = loss();
  if (y.value().size() != 1) throw ShapeError("grad_check_params requires a scalar loss");
  const GradientMap<double> grads = backward(y);
  Rng rng(seed);
  GradCheckReport r;
  std::size_t flat = 0;
  for (Var<double> p : params) {
    const Tensor<double> analytic = grads.get(p);
    const double floor = error_floor(analytic);
    Tensor<double>& value = p.mutable_value();
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_param && coords.size() > max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const double orig = value[i];
      value[i] = orig + h;
      const double fp = loss().value()[0];
      value[i] = orig - h;
      const double fm = loss().value()[0];
      value[i] = orig;
      const double e = relative_error(analytic[i], (fp - fm) / (2 * h), floor);
      if (e >= r.max_rel_err) {
        r.max_rel_err = e;
        r.worst_index = flat + i;
      }
      ++r.checked;
    }
    flat += value.size();
  }
  r.pass = r.max_rel_err <= tol;
  return r;
}

#define FFNET_INSTANTIATE(T)                                                                                  \
  template class Var<T>;                                                                                      \
  template class GradientMap<T>;                                                                              \
  template class Tape<T>;                                                                                     \
  template GradientMap<T> backward<T>(const Var<T>&, const Tensor<T>&);                                       \
  template GradientMap<T> backward<T>(const Var<T>&);                                                         \
  template Var<T> make_op<T>(std::string, std::vector<Var<T>>, Tensor<T>, BackwardFn<T>);                     \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> scale<T>(const Var<T>&, T);                                                                 \
  template Var<T> bias_add<T>(const Var<T>&, const Var<T>&, std::size_t);                                     \
  template Var<T> channel_scale<T>(const Var<T>&, const Var<T>&, std::size_t);                                \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeometry&);                \
  template Var<T> conv1d<T>(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeometry&);                \
  template Var<T> gelu<T>(const Var<T>&);                                                                     \
  template Var<T> relu<T>(const Var<T>&);                                                                     \
  template Var<T> softmax<T>(const Var<T>&, std::size_t);                                                     \
  template Var<T> batchnorm_infer<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Tensor<T>&,           \
                                     const Tensor<T>&, T);                                                    \
  template Var<T> batchnorm_train<T>(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, T,  \
                                     T);                                                                      \
  template Var<T> reshape<T>(const Var<T>&, const Shape&);                                                    \
  template Var<T> permute<T>(const Var<T>&, const std::vector<std::size_t>&);                                 \
  template Var<T> pad<T>(const Var<T>&, const std::vector<std::size_t>&, const std::vector<std::size_t>&);    \
  template Var<T> flatten<T>(const Var<T>&, std::size_t);                                                     \
  template Var<T> sum<T>(const Var<T>&);                                                                      \
  template Var<T> mean<T>(const Var<T>&);                                                                     \
  template Var<T> mean_trailing<T>(const Var<T>&, std::size_t);                                               \
  template Var<T> cross_entropy<T>(const Var<T>&, const std::vector<int>&);                                   \
  template Var<T> dropout<T>(const Var<T>&, T, Rng&);                                                         \
  template Var<T> mse<T>(const Var<T>&, const Var<T>&);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet::ad
