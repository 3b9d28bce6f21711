#include "ffnet/ffnet_image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

namespace ffnet {

void FFNetConfig::validate() const {
  auto bad = [&](const std::string& why) { throw ConfigError(name + ": " + why); };
  if (in_channels == 0 || stem.first == 0 || stem.second == 0) bad("stem channels must be positive");
  if (stages.empty()) bad("at least one stage is required");
  if (num_classes == 0) bad("num_classes must be positive");
  if (stem.second != stages.front().channels) bad("stem output channels must equal stage-1 channels");
  if (downsample_kernel % 2 == 0) bad("downsample kernel must be odd");
  if (!branches.empty() && branches.size() != stages.size()) bad("branches must list one entry per stage");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageConfig& st = stages[s];
    const std::string tag = "stage " + std::to_string(s + 1) + ": ";
    if (st.depth == 0) bad(tag + "depth must be >= 1");
    if (st.channels == 0) bad(tag + "channels must be positive");
    if (s > 0 && st.channels < stages[s - 1].channels) bad(tag + "channels must be nondecreasing");
    if (st.token_kernel % 2 == 0 || st.channel_kernel % 2 == 0) bad(tag + "kernels must be odd");
    if (!(st.expansion > 0)) bad(tag + "expansion ratio must be positive");
    if (std::round(st.expansion * static_cast<double>(st.channels)) < 1) bad(tag + "expanded width is zero");
    if (!branches.empty())
      for (auto [h, w] : branches[s])
        if (h % 2 == 0 || w % 2 == 0) bad(tag + "auxiliary kernels must be odd");
  }
}

namespace {

std::string normalized(const std::string& s) {
  std::string out;
  for (char c : s)
    if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

FFNetConfig ffnet_variant(int v) {
  struct Row {
    std::size_t c1;
    std::size_t depths[4];
    std::size_t channel_kernel;
  };
  static const Row rows[] = {{80, {2, 2, 8, 2}, 3}, {88, {3, 3, 15, 3}, 7}, {96, {4, 4, 22, 5}, 7}, {128, {4, 4, 27, 3}, 7}};
  if (v < 1 || v > 4) throw ConfigError("unknown FFNet variant " + std::to_string(v) + " (expected 1..4)");
  const Row& r = rows[v - 1];
  FFNetConfig cfg;
  cfg.name = "FFNet-" + std::to_string(v);
  cfg.stem = {64, r.c1};
  const std::size_t token_kernels[4] = {3, 3, 7, 7};
  for (std::size_t s = 0; s < 4; ++s)
    cfg.stages.push_back(StageConfig{r.depths[s], r.c1 << s, token_kernels[s], r.channel_kernel, 3.0});
  cfg.validate();
  return cfg;
}

FFNetConfig ffnet_variant(const std::string& name) {
  const std::string n = normalized(name);
  for (int v = 1; v <= 4; ++v)
    if (n == "ffnet" + std::to_string(v)) return ffnet_variant(v);
  throw ConfigError("unknown FFNet variant '" + name + "' (expected FFNet-1 .. FFNet-4)");
}

FFNetConfig with_default_branches(FFNetConfig cfg) {
  cfg.branches.assign(cfg.stages.size(), {});
  for (std::size_t s = 0; s < cfg.stages.size(); ++s)
    if (cfg.stages[s].token_kernel >= 7) cfg.branches[s] = {{3, 3}};
  cfg.name += "+branches";
  cfg.validate();
  return cfg;
}

FFNetConfig with_segmentation_branches(FFNetConfig cfg) {
  cfg.branches.assign(cfg.stages.size(), {});
  for (std::size_t s = 0; s < cfg.stages.size(); ++s)
    if (cfg.stages[s].token_kernel >= 7) {
      cfg.stages[s].token_kernel = 9;
      cfg.branches[s] = {{3, 3}, {9, 1}, {1, 9}};
    }
  cfg.name += "+seg-branches";
  cfg.validate();
  return cfg;
}

FFNetConfig toy_config(std::size_t num_classes) {
  FFNetConfig cfg;
  cfg.name = "toy";
  cfg.stem = {8, 16};
  const std::size_t kernels[4] = {3, 3, 7, 7};
  for (std::size_t s = 0; s < 4; ++s) cfg.stages.push_back(StageConfig{1, std::size_t{16} << s, kernels[s], 3, 3.0});
  cfg.num_classes = num_classes;
  cfg.validate();
  return cfg;
}

FFNetConfig ablation_3x3(FFNetConfig cfg) {
  for (auto& s : cfg.stages) s.token_kernel = s.channel_kernel = 3;
  cfg.downsample_kernel = 3;
  cfg.branches.clear();
  cfg.name += "-3x3";
  cfg.validate();
  return cfg;
}

template <typename T>
StateRefs<T> FFNetModel<T>::state() {
  StateRefs<T> r;
  r.add("stem1", stem1);
  r.add("stem2", stem2);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string sp = "stage" + std::to_string(s + 1);
    if (s > 0) {
      r.add(sp + ".down.dw", downsamples[s - 1].dw);
      r.add(sp + ".down.pw", downsamples[s - 1].pw);
    }
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      Block<T>& blk = stages[s][b];
      r.add(bp + ".token.proj", blk.token.proj);
      r.add(bp + ".token.dw1", blk.token.dw1);
      r.add(bp + ".token.dw2", blk.token.dw2);
      r.add(bp + ".token.layer_scale", blk.token.layer_scale);
      r.add(bp + ".channel.dw", blk.channel.dw);
      r.add(bp + ".channel.expand", blk.channel.expand);
      r.add(bp + ".channel.reduce", blk.channel.reduce);
      r.add(bp + ".channel.layer_scale", blk.channel.layer_scale);
    }
  }
  r.add("head.weight", head_w);
  r.add("head.bias", head_b);
  return r;
}

template <typename T>
std::size_t FFNetModel<T>::block_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.size();
  return n;
}

template <typename T>
Block<T>& FFNetModel<T>::block(std::size_t flat_index) {
  for (auto& s : stages) {
    if (flat_index < s.size()) return s[flat_index];
    flat_index -= s.size();
  }
  throw ConfigError("block index out of range");
}

template <typename T>
FFNetModel<T> build_ffnet(const FFNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  FFNetModel<T> m;
  m.config = cfg;
  const PadFill f = cfg.fill;
  m.stem1 = make_branched<T>(cfg.stem.first, cfg.in_channels, 3, 3, 2, 1, f, {}, rng);
  m.stem2 = make_branched<T>(cfg.stem.second, cfg.stem.first, 3, 3, 2, 1, f, {}, rng);
  std::size_t prev = cfg.stem.second;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::size_t c = st.channels;
    if (s > 0) {
      const std::size_t k = cfg.downsample_kernel;
      m.downsamples.push_back(Downsample<T>{make_branched<T>(prev, prev, k, k, 2, prev, f, {}, rng),
                                            make_branched<T>(c, prev, 1, 1, 1, 1, f, {}, rng)});
    }
    auto aux_for = [&](std::size_t k) {
      std::vector<KernelShape> a;
      if (cfg.branches.empty()) return a;
      for (auto kh : cfg.branches[s])
        if (kh.first <= k && kh.second <= k && kh != KernelShape{k, k}) a.push_back(kh);
      return a;
    };
    const auto hidden = static_cast<std::size_t>(std::round(st.expansion * static_cast<double>(c)));
    const ConvGeometry pointwise{};
    std::vector<Block<T>> blocks;
    for (std::size_t b = 0; b < st.depth; ++b) {
      Block<T> blk;
      blk.token.proj = make_branched<T>(c, c, 1, 1, 1, 1, f, {}, rng);
      blk.token.dw1 = make_branched<T>(c, c, st.token_kernel, st.token_kernel, 1, c, f, aux_for(st.token_kernel), rng);
      blk.token.dw2 = make_branched<T>(c, c, st.token_kernel, st.token_kernel, 1, c, f, aux_for(st.token_kernel), rng);
      blk.token.layer_scale = Param<T>(Tensor<T>::full({c}, static_cast<T>(cfg.layer_scale_init)));
      blk.channel.dw =
          make_branched<T>(c, c, st.channel_kernel, st.channel_kernel, 1, c, f, aux_for(st.channel_kernel), rng);
      blk.channel.expand = make_conv<T>(hidden, c, 1, 1, pointwise, true, rng);
      blk.channel.reduce = make_conv<T>(c, hidden, 1, 1, pointwise, true, rng);
      blk.channel.layer_scale = Param<T>(Tensor<T>::full({c}, static_cast<T>(cfg.layer_scale_init)));
      blocks.push_back(std::move(blk));
    }
    m.stages.push_back(std::move(blocks));
    prev = c;
  }
  m.head_w = Param<T>(trunc_normal<T>({prev, cfg.num_classes}, rng, T(0.02)));
  m.head_b = Param<T>(Tensor<T>({cfg.num_classes}));
  return m;
}

template <typename T>
ad::Var<T> stem_forward(FFNetModel<T>& m, const ad::Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != m.config.in_channels)
    throw ShapeError("stem expects [B, " + std::to_string(m.config.in_channels) + ", H, W], got " + to_string(s));
  if (s[2] % 4 != 0 || s[3] % 4 != 0) throw ShapeError("stem needs H and W divisible by 4, got " + to_string(s));
  ad::Var<T> y = ad::gelu(branched_forward(m.stem1, x, m.mode));
  return ad::gelu(branched_forward(m.stem2, y, m.mode));
}

template <typename T>
ad::Var<T> downsample_forward(Downsample<T>& d, const ad::Var<T>& x, NormMode mode) {
  if (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0)
    throw ShapeError("downsample needs even spatial dims, got " + to_string(x.shape()));
  return branched_forward(d.pw, branched_forward(d.dw, x, mode), mode);
}

template <typename T>
ad::Var<T> block_forward(Block<T>& b, const ad::Var<T>& x, NormMode mode, FeatureTrace<T>* trace) {
  ad::Var<T> t = branched_forward(b.token.proj, x, mode);
  t = ad::gelu(branched_forward(b.token.dw1, t, mode));
  t = branched_forward(b.token.dw2, t, mode);
  const ad::Var<T> y = ad::add(x, ad::channel_scale(t, b.token.layer_scale.var(), 1));

  const ad::Var<T> q = branched_forward(b.channel.dw, y, mode);
  const ad::Var<T> pre = conv_forward(b.channel.expand, q);
  const ad::Var<T> c = ad::gelu(pre);
  if (trace) {
    trace->channel_mixer_inputs.push_back(y.value());
    trace->pre_activations.push_back(pre.value());
    trace->coefficients.push_back(c.value());
  }
  const ad::Var<T> h = conv_forward(b.channel.reduce, c);
  return ad::add(y, ad::channel_scale(h, b.channel.layer_scale.var(), 1));
}

template <typename T>
ad::Var<T> forward_features(FFNetModel<T>& m, const ad::Var<T>& x, FeatureTrace<T>* trace) {
  const std::size_t div = m.config.resolution_divisor();
  if (x.shape().size() != 4 || x.shape()[2] % div != 0 || x.shape()[3] % div != 0)
    throw ShapeError("input resolution must be divisible by " + std::to_string(div) + ", got " +
                     to_string(x.shape()));
  ad::Var<T> y = stem_forward(m, x);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    if (s > 0) y = downsample_forward(m.downsamples[s - 1], y, m.mode);
    for (auto& blk : m.stages[s]) y = block_forward(blk, y, m.mode, trace);
  }
  return y;
}

template <typename T>
ad::Var<T> forward(FFNetModel<T>& m, const ad::Var<T>& x, FeatureTrace<T>* trace) {
  const ad::Var<T> pooled = ad::mean_trailing(forward_features(m, x, trace), 2);
  return ad::bias_add(ad::matmul(pooled, m.head_w.var()), m.head_b.var(), 1);
}

template <typename T>
Tensor<T> predict(FFNetModel<T>& m, const Tensor<T>& images) {
  ad::NoGradGuard guard;
  return forward(m, ad::Var<T>::constant(images)).value();
}

template <typename T>
void randomize_statistics(FFNetModel<T>& m, std::uint64_t seed, double ls_lo, double ls_hi) {
  Rng rng(seed);
  StateRefs<T> refs = m.state();
  auto has = [](const std::string& n, const char* part) { return n.find(part) != std::string::npos; };
  for (auto& p : refs.params) {
    Tensor<T>& v = p.param->value();
    if (has(p.name, ".gamma"))
      v = uniform<T>(v.shape(), rng, T(0.5), T(1.5));
    else if (has(p.name, ".beta"))
      v = uniform<T>(v.shape(), rng, T(-0.2), T(0.2));
    else if (has(p.name, "layer_scale"))
      v = uniform<T>(v.shape(), rng, static_cast<T>(ls_lo), static_cast<T>(ls_hi));
  }
  for (auto& b : refs.buffers)
    *b.tensor = has(b.name, "running_mean") ? uniform<T>(b.tensor->shape(), rng, T(-0.1), T(0.1))
                                            : uniform<T>(b.tensor->shape(), rng, T(0.5), T(2));
}

template <typename T>
std::size_t count_params(const FFNetModel<T>& m) {
  // state() only hands out views; nothing is modified here.
  return const_cast<FFNetModel<T>&>(m).state().param_count();
}

namespace {

template <typename T>
std::size_t branched_macs(const BranchedConv<T>& b, std::size_t& h, std::size_t& w) {
  std::size_t macs = 0, oh = 0, ow = 0;
  auto one = [&](const ConvBranch<T>& br) {
    const ConvGeometry& g = br.conv.geometry;
    const Shape& ws = br.conv.weight.value().shape();
    oh = conv_out_size(h, g.padding.top + g.padding.bottom, ws[2], g.stride);
    ow = conv_out_size(w, g.padding.left + g.padding.right, ws[3], g.stride);
    macs += conv_macs(ws, oh, ow);
  };
  one(b.main);
  for (const auto& a : b.aux) one(a);
  h = oh;
  w = ow;
  return macs;
}

}  // namespace

template <typename T>
std::size_t estimate_flops(const FFNetModel<T>& m, std::size_t height, std::size_t width) {
  const std::size_t div = m.config.resolution_divisor();
  if (height % div != 0 || width % div != 0)
    throw ShapeError("resolution must be divisible by " + std::to_string(div));
  std::size_t h = height, w = width;
  std::size_t total = branched_macs(m.stem1, h, w) + branched_macs(m.stem2, h, w);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    if (s > 0) {
      total += branched_macs(m.downsamples[s - 1].dw, h, w);
      total += branched_macs(m.downsamples[s - 1].pw, h, w);
    }
    for (const auto& blk : m.stages[s]) {
      total += branched_macs(blk.token.proj, h, w) + branched_macs(blk.token.dw1, h, w) +
               branched_macs(blk.token.dw2, h, w) + branched_macs(blk.channel.dw, h, w);
      total += conv_macs(blk.channel.expand.weight.value().shape(), h, w);
      total += conv_macs(blk.channel.reduce.weight.value().shape(), h, w);
    }
  }
  total += m.head_w.value().size();
  return total;
}

namespace {

template <typename U, typename T>
Param<U> cast_param(const Param<T>& p) {
  return p.defined() ? Param<U>(p.value().template cast<U>()) : Param<U>{};
}

template <typename U, typename T>
ConvParam<U> cast_conv(const ConvParam<T>& c) {
  return ConvParam<U>{cast_param<U>(c.weight), cast_param<U>(c.bias), c.geometry};
}

template <typename U, typename T>
ConvBranch<U> cast_branch(const ConvBranch<T>& b) {
  ConvBranch<U> out;
  out.conv = cast_conv<U>(b.conv);
  if (b.bn) {
    BNParam<U> bn;
    bn.gamma = cast_param<U>(b.bn->gamma);
    bn.beta = cast_param<U>(b.bn->beta);
    bn.running_mean = b.bn->running_mean.template cast<U>();
    bn.running_var = b.bn->running_var.template cast<U>();
    bn.epsilon = static_cast<U>(b.bn->epsilon);
    bn.momentum = static_cast<U>(b.bn->momentum);
    out.bn = std::move(bn);
  }
  return out;
}

template <typename U, typename T>
BranchedConv<U> cast_branched(const BranchedConv<T>& b) {
  BranchedConv<U> out;
  out.main = cast_branch<U>(b.main);
  for (const auto& a : b.aux) out.aux.push_back(cast_branch<U>(a));
  return out;
}

}  // namespace

template <typename U, typename T>
FFNetModel<U> cast_model(const FFNetModel<T>& m) {
  FFNetModel<U> out;
  out.config = m.config;
  out.mode = m.mode;
  out.stem1 = cast_branched<U>(m.stem1);
  out.stem2 = cast_branched<U>(m.stem2);
  for (const auto& d : m.downsamples) out.downsamples.push_back({cast_branched<U>(d.dw), cast_branched<U>(d.pw)});
  for (const auto& stage : m.stages) {
    std::vector<Block<U>> blocks;
    for (const auto& b : stage) {
      Block<U> nb;
      nb.token = {cast_branched<U>(b.token.proj), cast_branched<U>(b.token.dw1), cast_branched<U>(b.token.dw2),
                  cast_param<U>(b.token.layer_scale)};
      nb.channel = {cast_branched<U>(b.channel.dw), cast_conv<U>(b.channel.expand), cast_conv<U>(b.channel.reduce),
                    cast_param<U>(b.channel.layer_scale)};
      blocks.push_back(std::move(nb));
    }
    out.stages.push_back(std::move(blocks));
  }
  out.head_w = cast_param<U>(m.head_w);
  out.head_b = cast_param<U>(m.head_b);
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (shuffle) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    Rng rng(seq);
    std::shuffle(idx.begin(), idx.end(), rng);
  }
  return idx;
}

template <typename T>
double evaluate_accuracy(FFNetModel<T>& model, const ImageDataset& data, std::size_t batch_size) {
  data.validate();
  const NormMode saved = model.mode;
  model.mode = NormMode::infer;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor<T> logits = predict(model, data.gather(idx).template cast<T>());
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto* row = logits.ptr() + i * k;
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      if (best == data.labels[idx[i]]) ++correct;
    }
  }
  model.mode = saved;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
TrainReport train_toy(FFNetModel<T>& model, const ImageDataset& data, const TrainOptions& opts, TrainState<T>& state,
                      const std::function<bool(const EpochStats&)>& on_epoch) {
  data.validate();
  if (opts.batch_size == 0) throw ConfigError("batch size must be positive");
  if (data.num_classes > model.config.num_classes) throw ConfigError("dataset has more classes than the model head");
  AdamWOptions ao;
  ao.lr = opts.lr;
  ao.weight_decay = opts.weight_decay;
  state.optimizer.set_options(ao);
  StateRefs<T> refs = model.state();
  TrainReport report;
  for (std::size_t epoch = state.epochs_done + 1; epoch <= opts.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), opts.seed, epoch, opts.shuffle);
    double loss_sum = 0;
    std::size_t batches = 0;
    model.mode = NormMode::train;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + opts.batch_size)));
      const ad::Var<T> x = ad::Var<T>::constant(data.gather(idx).template cast<T>());
      const ad::Var<T> loss = ad::cross_entropy(forward(model, x), data.gather_labels(idx));
      const double l = loss.value()[0];
      if (!std::isfinite(l))
        throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      state.optimizer.step(refs, ad::backward(loss));
      loss_sum += l;
      ++batches;
    }
    model.mode = NormMode::infer;
    EpochStats st{epoch, loss_sum / static_cast<double>(batches), evaluate_accuracy(model, data)};
    state.epochs_done = epoch;
    report.epochs.push_back(st);
    if (on_epoch && !on_epoch(st)) break;
  }
  model.mode = NormMode::infer;
  return report;
}

#define FFNET_INSTANTIATE(T)                                                                                       \
  template struct FFNetModel<T>;                                                                                   \
  template FFNetModel<T> build_ffnet<T>(const FFNetConfig&, std::uint64_t);                                        \
  template ad::Var<T> stem_forward<T>(FFNetModel<T>&, const ad::Var<T>&);                                          \
  template ad::Var<T> downsample_forward<T>(Downsample<T>&, const ad::Var<T>&, NormMode);                          \
  template ad::Var<T> block_forward<T>(Block<T>&, const ad::Var<T>&, NormMode, FeatureTrace<T>*);                  \
  template ad::Var<T> forward_features<T>(FFNetModel<T>&, const ad::Var<T>&, FeatureTrace<T>*);                    \
  template ad::Var<T> forward<T>(FFNetModel<T>&, const ad::Var<T>&, FeatureTrace<T>*);                             \
  template Tensor<T> predict<T>(FFNetModel<T>&, const Tensor<T>&);                                                 \
  template std::size_t count_params<T>(const FFNetModel<T>&);                                                      \
  template void randomize_statistics<T>(FFNetModel<T>&, std::uint64_t, double, double);                                                      \
  template std::size_t estimate_flops<T>(const FFNetModel<T>&, std::size_t, std::size_t);                          \
  template double evaluate_accuracy<T>(FFNetModel<T>&, const ImageDataset&, std::size_t);                          \
  template TrainReport train_toy<T>(FFNetModel<T>&, const ImageDataset&, const TrainOptions&, TrainState<T>&,      \
                                    const std::function<bool(const EpochStats&)>&);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

template FFNetModel<double> cast_model<double, float>(const FFNetModel<float>&);
template FFNetModel<float> cast_model<float, double>(const FFNetModel<double>&);
template FFNetModel<float> cast_model<float, float>(const FFNetModel<float>&);
template FFNetModel<double> cast_model<double, double>(const FFNetModel<double>&);

}  // namespace ffnet
