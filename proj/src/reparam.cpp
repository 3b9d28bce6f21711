#include "ffnet/reparam.hpp"

#include <cmath>
#include <functional>

namespace ffnet {

template <typename T>
ConvLayer<T> fold_bn(const ConvLayer<T>& conv, const BatchNormParams<T>& bn) {
  conv.validate();
  bn.validate();
  const std::size_t oc = conv.out_channels();
  if (bn.channels() != oc)
    throw ShapeError("BN has " + std::to_string(bn.channels()) + " channels, conv outputs " + std::to_string(oc));
  ConvLayer<T> out = conv;
  out.bias = Tensor<T>({oc});
  const std::size_t per = conv.weight.size() / oc;
  for (std::size_t c = 0; c < oc; ++c) {
    const T k = bn.gamma[c] / std::sqrt(bn.running_var[c] + bn.epsilon);
    for (std::size_t i = 0; i < per; ++i) out.weight[c * per + i] *= k;
    const T b = conv.bias.empty() ? T(0) : conv.bias[c];
    out.bias[c] = (b - bn.running_mean[c]) * k + bn.beta[c];
  }
  check_finite(out.weight, "fold_bn");
  return out;
}

template <typename T>
Tensor<T> embed_kernel(const Tensor<T>& small, std::size_t kh, std::size_t kw) {
  if (small.rank() < 2) throw ShapeError("kernel must have at least 2 axes");
  const std::size_t r = small.rank();
  const std::size_t sh = small.dim(r - 2), sw = small.dim(r - 1);
  if (sh > kh || sw > kw)
    throw ShapeError("kernel " + std::to_string(sh) + "x" + std::to_string(sw) + " does not fit in " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  if ((kh - sh) % 2 != 0 || (kw - sw) % 2 != 0)
    throw ShapeError("kernel parity mismatch: cannot center " + std::to_string(sh) + "x" + std::to_string(sw) +
                     " in " + std::to_string(kh) + "x" + std::to_string(kw));
  std::vector<std::size_t> before(r, 0), after(r, 0);
  before[r - 2] = after[r - 2] = (kh - sh) / 2;
  before[r - 1] = after[r - 1] = (kw - sw) / 2;
  return pad(small, before, after);
}

template <typename T>
ConvLayer<T> merge_branches(const BranchSet<T>& b) {
  auto folded = [](const Branch<T>& br) {
    br.conv.validate();
    if (br.conv.weight.rank() != 4) throw ShapeError("branch merging needs 2-D kernels");
    return br.bn ? fold_bn(br.conv, *br.bn) : br.conv;
  };
  ConvLayer<T> out = folded(b.main);
  const ConvGeometry& g = out.geometry;
  const std::size_t kh = out.kernel_h(), kw = out.kernel_w();
  if (out.bias.empty()) out.bias = Tensor<T>({out.out_channels()});
  for (const auto& a : b.aux) {
    const ConvLayer<T> f = folded(a);
    const ConvGeometry& ag = f.geometry;
    if (ag.stride != g.stride) throw ConfigError("branches with different strides cannot be merged");
    if (ag.groups != g.groups) throw ConfigError("branches with different group counts cannot be merged");
    if (f.weight.dim(0) != out.weight.dim(0) || f.weight.dim(1) != out.weight.dim(1))
      throw ShapeError("branch channel counts differ");
    if (ag.padding.fill != g.padding.fill) throw ConfigError("branches with different padding fills cannot be merged");
    const std::size_t ah = f.kernel_h(), aw = f.kernel_w();
    if (ah > kh || aw > kw) throw ShapeError("auxiliary kernel larger than the main kernel");
    const std::size_t dh = (kh - ah) / 2, dw = (kw - aw) / 2;
    if (ag.padding.top + dh != g.padding.top || ag.padding.bottom + dh != g.padding.bottom ||
        ag.padding.left + dw != g.padding.left || ag.padding.right + dw != g.padding.right)
      throw ConfigError("auxiliary padding is not aligned with the main kernel center");
    const Tensor<T> w = embed_kernel(f.weight, kh, kw);
    for (std::size_t i = 0; i < w.size(); ++i) out.weight[i] += w[i];
    if (!f.bias.empty())
      for (std::size_t c = 0; c < out.bias.size(); ++c) out.bias[c] += f.bias[c];
  }
  return out;
}

template <typename T>
Tensor<T> branch_set_forward(const BranchSet<T>& b, const Tensor<T>& x) {
  auto run = [&](const Branch<T>& br) {
    Tensor<T> y = grouped_conv2d(x, br.conv);
    return br.bn ? batchnorm_infer(y, *br.bn) : y;
  };
  Tensor<T> y = run(b.main);
  for (const auto& a : b.aux) y = add(y, run(a));
  return y;
}

namespace {

template <typename T>
Branch<T> to_branch(const ConvBranch<T>& c) {
  Branch<T> b{c.conv.layer(), std::nullopt};
  if (c.bn) b.bn = c.bn->params();
  return b;
}

template <typename T>
BranchedConv<T> merged(const BranchedConv<T>& b) {
  BranchedConv<T> out;
  out.main.conv = ConvParam<T>::from(merge_branches(to_branch_set(b)));
  return out;
}

// Visits corresponding branched convs of two models with the same layout.
template <typename T, typename F>
void for_each_branched(FFNetModel<T>& a, FFNetModel<T>& b, F f) {
  f("stem1", a.stem1, b.stem1);
  f("stem2", a.stem2, b.stem2);
  if (a.stages.size() != b.stages.size()) throw ShapeError("models differ in stage count");
  for (std::size_t s = 0; s < a.stages.size(); ++s) {
    const std::string sp = "stage" + std::to_string(s + 1);
    if (s > 0) {
      f(sp + ".down.dw", a.downsamples[s - 1].dw, b.downsamples[s - 1].dw);
      f(sp + ".down.pw", a.downsamples[s - 1].pw, b.downsamples[s - 1].pw);
    }
    if (a.stages[s].size() != b.stages[s].size()) throw ShapeError("models differ in depth");
    for (std::size_t i = 0; i < a.stages[s].size(); ++i) {
      const std::string bp = sp + ".block" + std::to_string(i);
      Block<T>& x = a.stages[s][i];
      Block<T>& y = b.stages[s][i];
      f(bp + ".token.proj", x.token.proj, y.token.proj);
      f(bp + ".token.dw1", x.token.dw1, y.token.dw1);
      f(bp + ".token.dw2", x.token.dw2, y.token.dw2);
      f(bp + ".channel.dw", x.channel.dw, y.channel.dw);
    }
  }
}

}  // namespace

template <typename T>
BranchSet<T> to_branch_set(const BranchedConv<T>& b) {
  BranchSet<T> s{to_branch(b.main), {}};
  for (const auto& a : b.aux) s.aux.push_back(to_branch(a));
  return s;
}

template <typename T>
FFNetModel<T> reparameterize_model(const FFNetModel<T>& model) {
  if (model.mode != NormMode::infer) throw ConfigError("re-parameterization requires a model in infer mode");
  FFNetModel<T> out = model;
  FFNetModel<T>& src = const_cast<FFNetModel<T>&>(model);
  for_each_branched(src, out, [](const std::string&, BranchedConv<T>& from, BranchedConv<T>& to) {
    to = merged(from);
  });
  return out;
}

template <typename T>
EquivalenceReport assert_equivalence(FFNetModel<T>& original, FFNetModel<T>& merged_model, std::size_t n_samples,
                                     double tol, std::size_t hw, std::uint64_t seed, std::size_t batch) {
  if (original.mode != NormMode::infer || merged_model.mode != NormMode::infer)
    throw ConfigError("equivalence checks require infer mode");
  if (n_samples == 0 || batch == 0) throw ConfigError("need at least one sample");
  EquivalenceReport r;
  r.samples = n_samples;
  r.tol = tol;
  Rng rng(seed);
  const std::size_t c = original.config.in_channels;
  for (std::size_t done = 0; done < n_samples; done += batch) {
    const std::size_t b = std::min(batch, n_samples - done);
    const Tensor<T> x = randn<T>({b, c, hw, hw}, rng);
    const double d = static_cast<double>(max_abs_diff(predict(original, x), predict(merged_model, x)));
    r.max_diff = std::max(r.max_diff, d);
  }
  for_each_branched(original, merged_model, [&](const std::string& name, BranchedConv<T>& a, BranchedConv<T>& m) {
    const std::size_t in = a.main.conv.layer().in_channels();
    const Tensor<T> x = randn<T>({2, in, 8, 8}, rng);
    const double d = static_cast<double>(
        max_abs_diff(branch_set_forward(to_branch_set(a), x), branch_set_forward(to_branch_set(m), x)));
    r.layers.push_back({name, d});
  });
  r.pass = r.max_diff <= tol;
  for (const auto& l : r.layers) r.pass = r.pass && l.max_diff <= tol;
  return r;
}

template <typename T>
std::size_t count_aux_branches(const FFNetModel<T>& m) {
  std::size_t n = 0;
  auto& mm = const_cast<FFNetModel<T>&>(m);
  for_each_branched(mm, mm, [&](const std::string&, BranchedConv<T>& b, BranchedConv<T>&) { n += b.aux.size(); });
  return n;
}

template <typename T>
std::size_t count_bn_records(const FFNetModel<T>& m) {
  std::size_t n = 0;
  auto& mm = const_cast<FFNetModel<T>&>(m);
  for_each_branched(mm, mm, [&](const std::string&, BranchedConv<T>& b, BranchedConv<T>&) {
    n += b.main.bn.has_value();
    for (const auto& a : b.aux) n += a.bn.has_value();
  });
  return n;
}

#define FFNET_INSTANTIATE(T)                                                                                    \
  template ConvLayer<T> fold_bn<T>(const ConvLayer<T>&, const BatchNormParams<T>&);                            \
  template Tensor<T> embed_kernel<T>(const Tensor<T>&, std::size_t, std::size_t);                              \
  template ConvLayer<T> merge_branches<T>(const BranchSet<T>&);                                                 \
  template Tensor<T> branch_set_forward<T>(const BranchSet<T>&, const Tensor<T>&);                              \
  template BranchSet<T> to_branch_set<T>(const BranchedConv<T>&);                                               \
  template FFNetModel<T> reparameterize_model<T>(const FFNetModel<T>&);                                         \
  template EquivalenceReport assert_equivalence<T>(FFNetModel<T>&, FFNetModel<T>&, std::size_t, double,         \
                                                   std::size_t, std::uint64_t, std::size_t);                    \
  template std::size_t count_aux_branches<T>(const FFNetModel<T>&);                                             \
  template std::size_t count_bn_records<T>(const FFNetModel<T>&);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
