#include "ffnet/layers.hpp"

namespace ffnet {

template <typename T>
ConvLayer<T> ConvParam<T>::layer() const {
  return ConvLayer<T>{weight.value(), bias.defined() ? bias.value() : Tensor<T>{}, geometry};
}

template <typename T>
ConvParam<T> ConvParam<T>::from(const ConvLayer<T>& l) {
  l.validate();
  ConvParam c;
  c.weight = Param<T>(l.weight);
  if (!l.bias.empty()) c.bias = Param<T>(l.bias);
  c.geometry = l.geometry;
  return c;
}

template <typename T>
BatchNormParams<T> BNParam<T>::params() const {
  return BatchNormParams<T>{gamma.value(), beta.value(), running_mean, running_var, epsilon, momentum};
}

template <typename T>
BNParam<T> BNParam<T>::from(const BatchNormParams<T>& p) {
  p.validate();
  BNParam b;
  b.gamma = Param<T>(p.gamma);
  b.beta = Param<T>(p.beta);
  b.running_mean = p.running_mean;
  b.running_var = p.running_var;
  b.epsilon = p.epsilon;
  b.momentum = p.momentum;
  return b;
}

template <typename T>
BNParam<T> BNParam<T>::identity(std::size_t channels) {
  return from(BatchNormParams<T>::identity(channels));
}

template <typename T>
ConvParam<T> make_conv(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, ConvGeometry geom, bool bias,
                       Rng& rng, T stddev) {
  if (in % geom.groups != 0 || out % geom.groups != 0)
    throw ShapeError("channels " + std::to_string(in) + "->" + std::to_string(out) + " not divisible by groups " +
                     std::to_string(geom.groups));
  ConvParam<T> c;
  c.weight = Param<T>(trunc_normal<T>({out, in / geom.groups, kh, kw}, rng, stddev));
  if (bias) c.bias = Param<T>(Tensor<T>({out}));
  c.geometry = geom;
  return c;
}

template <typename T>
ConvParam<T> make_conv1d(std::size_t out, std::size_t in, std::size_t k, ConvGeometry geom, bool bias, Rng& rng,
                         T stddev) {
  if (in % geom.groups != 0 || out % geom.groups != 0)
    throw ShapeError("channels " + std::to_string(in) + "->" + std::to_string(out) + " not divisible by groups " +
                     std::to_string(geom.groups));
  ConvParam<T> c;
  c.weight = Param<T>(trunc_normal<T>({out, in / geom.groups, k}, rng, stddev));
  if (bias) c.bias = Param<T>(Tensor<T>({out}));
  c.geometry = geom;
  return c;
}

template <typename T>
BranchedConv<T> make_branched(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, std::size_t stride,
                              std::size_t groups, PadFill fill,
                              const std::vector<std::pair<std::size_t, std::size_t>>& aux, Rng& rng) {
  BranchedConv<T> b;
  b.main.conv = make_conv<T>(out, in, kh, kw, ConvGeometry{stride, Padding::same(kh, kw, fill), groups}, false, rng);
  b.main.bn = BNParam<T>::identity(out);
  for (auto [ah, aw] : aux) {
    if (ah > kh || aw > kw)
      throw ConfigError("auxiliary kernel " + std::to_string(ah) + "x" + std::to_string(aw) + " exceeds main kernel " +
                        std::to_string(kh) + "x" + std::to_string(kw));
    ConvBranch<T> br;
    br.conv = make_conv<T>(out, in, ah, aw, ConvGeometry{stride, Padding::same(ah, aw, fill), groups}, false, rng);
    br.bn = BNParam<T>::identity(out);
    b.aux.push_back(std::move(br));
  }
  return b;
}

template <typename T>
ad::Var<T> conv_forward(const ConvParam<T>& c, const ad::Var<T>& x) {
  const ad::Var<T> bias = c.bias.defined() ? c.bias.var() : ad::Var<T>{};
  if (c.weight.value().rank() == 3) return ad::conv1d(x, c.weight.var(), bias, c.geometry);
  return ad::conv2d(x, c.weight.var(), bias, c.geometry);
}

template <typename T>
ad::Var<T> bn_forward(BNParam<T>& bn, const ad::Var<T>& x, NormMode mode) {
  if (mode == NormMode::train)
    return ad::batchnorm_train(x, bn.gamma.var(), bn.beta.var(), bn.running_mean, bn.running_var, bn.epsilon,
                               bn.momentum);
  return ad::batchnorm_infer(x, bn.gamma.var(), bn.beta.var(), bn.running_mean, bn.running_var, bn.epsilon);
}

template <typename T>
ad::Var<T> branch_forward(ConvBranch<T>& b, const ad::Var<T>& x, NormMode mode) {
  ad::Var<T> y = conv_forward(b.conv, x);
  return b.bn ? bn_forward(*b.bn, y, mode) : y;
}

template <typename T>
ad::Var<T> branched_forward(BranchedConv<T>& b, const ad::Var<T>& x, NormMode mode) {
  ad::Var<T> y = branch_forward(b.main, x, mode);
  for (auto& a : b.aux) y = ad::add(y, branch_forward(a, x, mode));
  return y;
}

std::size_t conv_macs(const Shape& w, std::size_t out_h, std::size_t out_w) {
  return numel(w) * out_h * out_w;
}

template <typename T>
void StateRefs<T>::add(const std::string& name, Param<T>& p) {
  if (p.defined()) params.push_back({name, &p});
}

template <typename T>
void StateRefs<T>::add(const std::string& prefix, ConvParam<T>& c) {
  add(prefix + ".weight", c.weight);
  add(prefix + ".bias", c.bias);
}

template <typename T>
void StateRefs<T>::add(const std::string& prefix, BNParam<T>& bn) {
  add(prefix + ".gamma", bn.gamma);
  add(prefix + ".beta", bn.beta);
  buffers.push_back({prefix + ".running_mean", &bn.running_mean});
  buffers.push_back({prefix + ".running_var", &bn.running_var});
}

template <typename T>
void StateRefs<T>::add(const std::string& prefix, ConvBranch<T>& b) {
  add(prefix + ".conv", b.conv);
  if (b.bn) add(prefix + ".bn", *b.bn);
}

template <typename T>
void StateRefs<T>::add(const std::string& prefix, BranchedConv<T>& b) {
  add(prefix, b.main);
  for (std::size_t i = 0; i < b.aux.size(); ++i) add(prefix + ".aux" + std::to_string(i), b.aux[i]);
}

template <typename T>
std::size_t StateRefs<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.param->value().size();
  return n;
}

template <typename T>
std::vector<ad::Var<T>> StateRefs<T>::vars() const {
  std::vector<ad::Var<T>> v;
  v.reserve(params.size());
  for (const auto& p : params) v.push_back(p.param->var());
  return v;
}

template <typename T>
void StateRefs<T>::set_requires_grad(bool on) {
  for (auto& p : params) p.param->set_requires_grad(on);
}

#define FFNET_INSTANTIATE(T)                                                                                     \
  template class Param<T>;                                                                                       \
  template struct ConvParam<T>;                                                                                  \
  template struct BNParam<T>;                                                                                    \
  template struct StateRefs<T>;                                                                                  \
  template ConvParam<T> make_conv<T>(std::size_t, std::size_t, std::size_t, std::size_t, ConvGeometry, bool, Rng&, \
                                     T);                                                                         \
  template ConvParam<T> make_conv1d<T>(std::size_t, std::size_t, std::size_t, ConvGeometry, bool, Rng&, T);      \
  template BranchedConv<T> make_branched<T>(std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,     \
                                            std::size_t, PadFill,                                                \
                                            const std::vector<std::pair<std::size_t, std::size_t>>&, Rng&);      \
  template ad::Var<T> conv_forward<T>(const ConvParam<T>&, const ad::Var<T>&);                                   \
  template ad::Var<T> bn_forward<T>(BNParam<T>&, const ad::Var<T>&, NormMode);                                   \
  template ad::Var<T> branch_forward<T>(ConvBranch<T>&, const ad::Var<T>&, NormMode);                            \
  template ad::Var<T> branched_forward<T>(BranchedConv<T>&, const ad::Var<T>&, NormMode);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
