#include "ffnet/timeseries.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ffnet/ffnet_image.hpp"

namespace ffnet {

void TSConfig::validate() const {
  if (n_vars == 0 || d_model == 0 || expansion == 0 || token_expansion == 0 || horizon == 0)
    throw ConfigError("time-series sizes must be positive");
  if (patch == 0 || stride == 0 || patch < stride) throw ConfigError("need patch >= stride > 0");
  if (lookback < patch) throw ConfigError("lookback " + std::to_string(lookback) + " shorter than patch");
  if (lookback < 2) throw ConfigError("lookback must be at least 2");
  if (token_kernel % 2 == 0 || channel_kernel % 2 == 0) throw ConfigError("depthwise kernels must be odd");
  if (!(drop1 >= 0 && drop1 < 1 && drop2 >= 0 && drop2 < 1)) throw ConfigError("drop rates must lie in [0, 1)");
  if (!(revin_eps > 0)) throw ConfigError("RevIN epsilon must be positive");
}

template <typename T>
std::pair<ad::Var<T>, RevINState<T>> revin_normalize(const ad::Var<T>& x, T eps) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("RevIN expects [B, M, L], got " + to_string(s));
  const std::size_t rows = s[0] * s[1], l = s[2];
  if (l < 2) throw ShapeError("RevIN needs a lookback of at least 2");
  RevINState<T> st{Tensor<T>({s[0], s[1]}), Tensor<T>({s[0], s[1]}), eps};
  Tensor<T> shift({rows * l}), inv({rows * l});
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < l; ++i) mu += static_cast<double>(x.value()[r * l + i]);
    mu /= static_cast<double>(l);
    for (std::size_t i = 0; i < l; ++i) {
      const double d = static_cast<double>(x.value()[r * l + i]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(l);
    st.mean[r] = static_cast<T>(mu);
    st.std[r] = static_cast<T>(std::sqrt(var + static_cast<double>(eps)));
    for (std::size_t i = 0; i < l; ++i) {
      shift[r * l + i] = -st.mean[r];
      inv[r * l + i] = T(1) / st.std[r];
    }
  }
  const ad::Var<T> c = ad::Var<T>::constant(reshape(std::move(shift), s));
  const ad::Var<T> k = ad::Var<T>::constant(reshape(std::move(inv), s));
  return {ad::mul(ad::add(x, c), k), std::move(st)};
}

template <typename T>
ad::Var<T> revin_denormalize(const ad::Var<T>& y, const RevINState<T>& st) {
  const Shape& s = y.shape();
  if (s.size() != 3 || s[0] != st.mean.dim(0) || s[1] != st.mean.dim(1))
    throw ShapeError("RevIN state " + to_string(st.mean.shape()) + " does not match " + to_string(s));
  const std::size_t rows = s[0] * s[1], l = s[2];
  Tensor<T> mu({rows * l}), sd({rows * l});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < l; ++i) {
      mu[r * l + i] = st.mean[r];
      sd[r * l + i] = st.std[r];
    }
  return ad::add(ad::mul(y, ad::Var<T>::constant(reshape(std::move(sd), s))),
                 ad::Var<T>::constant(reshape(std::move(mu), s)));
}

namespace {

template <typename T>
ConvParam<T> pointwise1d(std::size_t out, std::size_t in, std::size_t groups, Rng& rng) {
  return make_conv1d<T>(out, in, 1, ConvGeometry{1, Padding{}, groups}, true, rng);
}

template <typename T>
ConvParam<T> depthwise1d(std::size_t channels, std::size_t k, Rng& rng) {
  return make_conv1d<T>(channels, channels, k, ConvGeometry{1, Padding::same1d(k), channels}, true, rng);
}

template <typename T>
ad::Var<T> maybe_drop(const ad::Var<T>& x, T p, Rng* rng) {
  if (p == T(0) || !rng) return x;
  return ad::dropout(x, p, *rng);
}

template <typename T>
void check_ffn(const GroupedFFN<T>& p, const Shape& s, std::size_t e_r, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + " expects [B, M, D, N], got " + to_string(s));
  const std::size_t md = s[1] * s[2];
  const Shape& w1 = p.fc1.weight.value().shape();
  const Shape& w2 = p.fc2.weight.value().shape();
  if (w1[0] != md * e_r || w2[0] != md || p.fc1.geometry.groups * w1[1] != md ||
      p.fc2.geometry.groups * w2[1] != md * e_r)
    throw ShapeError(std::string(what) + " weights " + to_string(w1) + ", " + to_string(w2) +
                     " do not match input " + to_string(s) + " with e_r " + std::to_string(e_r));
}

}  // namespace

template <typename T>
GroupedFFN<T> make_cviffn(std::size_t m, std::size_t d, std::size_t e_r, Rng& rng) {
  return {pointwise1d<T>(m * d * e_r, m * d, d, rng), pointwise1d<T>(m * d, m * d * e_r, m, rng)};
}

template <typename T>
GroupedFFN<T> make_ciffn(std::size_t m, std::size_t d, std::size_t e_r, Rng& rng) {
  return {pointwise1d<T>(m * d * e_r, m * d, m, rng), pointwise1d<T>(m * d, m * d * e_r, d, rng)};
}

template <typename T>
ad::Var<T> cviffn_forward(const GroupedFFN<T>& p, const ad::Var<T>& x, std::size_t e_r, T drop1, T drop2, Rng* rng) {
  check_ffn(p, x.shape(), e_r, "CVIFFN");
  const std::size_t b = x.shape()[0], m = x.shape()[1], d = x.shape()[2], n = x.shape()[3];
  ad::Var<T> h = ad::reshape(ad::permute(x, {0, 2, 1, 3}), {b, d * m, n});
  h = ad::gelu(maybe_drop(conv_forward(p.fc1, h), drop1, rng));
  h = ad::reshape(h, {b, d, e_r * m, n});
  h = ad::reshape(ad::permute(h, {0, 2, 1, 3}), {b, m * e_r * d, n});
  h = maybe_drop(conv_forward(p.fc2, h), drop2, rng);
  return ad::reshape(h, {b, m, d, n});
}

template <typename T>
ad::Var<T> ciffn_forward(const GroupedFFN<T>& p, const ad::Var<T>& x, std::size_t e_r, T drop1, T drop2, Rng* rng) {
  check_ffn(p, x.shape(), e_r, "CIFFN");
  const std::size_t b = x.shape()[0], m = x.shape()[1], d = x.shape()[2], n = x.shape()[3];
  const std::size_t hidden = d * e_r;
  ad::Var<T> h = ad::reshape(x, {b, m * d, n});
  h = ad::gelu(maybe_drop(conv_forward(p.fc1, h), drop1, rng));
  h = ad::reshape(h, {b, m, hidden, n});
  h = ad::reshape(ad::permute(h, {0, 2, 1, 3}), {b, hidden * m, n});
  h = maybe_drop(conv_forward(p.fc2, h), drop2, rng);
  return ad::permute(ad::reshape(h, {b, d, m, n}), {0, 2, 1, 3});
}

template <typename T>
StateRefs<T> TSModel<T>::state() {
  StateRefs<T> r;
  r.add("embed", embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    TSBlock<T>& b = blocks[i];
    r.add(p + ".norm1", b.norm1);
    r.add(p + ".cviffn.fc1", b.cviffn.fc1);
    r.add(p + ".cviffn.fc2", b.cviffn.fc2);
    r.add(p + ".dw1", b.dw1);
    r.add(p + ".dw2", b.dw2);
    r.add(p + ".ls1", b.ls1);
    r.add(p + ".norm2", b.norm2);
    r.add(p + ".dw3", b.dw3);
    r.add(p + ".ciffn.fc1", b.ciffn.fc1);
    r.add(p + ".ciffn.fc2", b.ciffn.fc2);
    r.add(p + ".ls2", b.ls2);
  }
  r.add("head.weight", head_w);
  r.add("head.bias", head_b);
  return r;
}

template <typename T>
TSModel<T> build_ts_model(const TSConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t m = cfg.n_vars, d = cfg.d_model, md = m * d;
  TSModel<T> model;
  model.config = cfg;
  model.embed = make_conv1d<T>(d, 1, cfg.patch, ConvGeometry{cfg.stride, Padding{}, 1}, true, rng);
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    TSBlock<T> b;
    b.norm1 = BNParam<T>::identity(md);
    b.cviffn = make_cviffn<T>(m, d, cfg.token_expansion, rng);
    b.dw1 = depthwise1d<T>(md, cfg.token_kernel, rng);
    b.dw2 = depthwise1d<T>(md, cfg.token_kernel, rng);
    b.ls1 = Param<T>(Tensor<T>({d}, static_cast<T>(cfg.layer_scale_init)));
    b.norm2 = BNParam<T>::identity(md);
    b.dw3 = depthwise1d<T>(md, cfg.channel_kernel, rng);
    b.ciffn = make_ciffn<T>(m, d, cfg.expansion, rng);
    b.ls2 = Param<T>(Tensor<T>({d}, static_cast<T>(cfg.layer_scale_init)));
    model.blocks.push_back(std::move(b));
  }
  model.head_w = Param<T>(trunc_normal<T>({d * cfg.tokens(), cfg.horizon}, rng, T(0.02)));
  model.head_b = Param<T>(Tensor<T>({cfg.horizon}));
  model.dropout_rng.seed(seed ^ 0x5eedULL);
  return model;
}

template <typename T>
ad::Var<T> patch_embed(const ConvParam<T>& embed, const ad::Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("patch_embed expects [B, M, L], got " + to_string(s));
  const Shape& w = embed.weight.value().shape();
  if (w.size() != 3 || w[1] != 1) throw ShapeError("patch embedding weight must be [D, 1, patch]");
  if (s[2] < w[2])
    throw ShapeError("series length " + std::to_string(s[2]) + " shorter than patch " + std::to_string(w[2]));
  const ad::Var<T> y = conv_forward(embed, ad::reshape(x, {s[0] * s[1], 1, s[2]}));
  return ad::reshape(y, {s[0], s[1], w[0], y.shape()[2]});
}

template <typename T>
ad::Var<T> ts_block_forward(TSBlock<T>& b, const TSConfig& cfg, const ad::Var<T>& x, NormMode mode, Rng* rng) {
  const Shape s = x.shape();
  if (s.size() != 4 || s[1] != cfg.n_vars || s[2] != cfg.d_model)
    throw ShapeError("block input must be [B, " + std::to_string(cfg.n_vars) + ", " + std::to_string(cfg.d_model) +
                     ", N], got " + to_string(s));
  const std::size_t bsz = s[0], md = s[1] * s[2], n = s[3];
  const T p1 = static_cast<T>(cfg.drop1), p2 = static_cast<T>(cfg.drop2);
  Rng* r = mode == NormMode::train ? rng : nullptr;
  auto flat = [&](const ad::Var<T>& v) { return ad::reshape(v, {bsz, md, n}); };
  auto full = [&](const ad::Var<T>& v) { return ad::reshape(v, s); };

  ad::Var<T> t = full(bn_forward(b.norm1, flat(x), mode));
  t = flat(cviffn_forward(b.cviffn, t, cfg.token_expansion, p1, p2, r));
  t = conv_forward(b.dw2, ad::gelu(conv_forward(b.dw1, t)));
  const ad::Var<T> y = ad::add(x, ad::channel_scale(full(t), b.ls1.var(), 2));

  ad::Var<T> c = conv_forward(b.dw3, bn_forward(b.norm2, flat(y), mode));
  c = ciffn_forward(b.ciffn, full(c), cfg.expansion, p1, p2, r);
  return ad::add(y, ad::channel_scale(c, b.ls2.var(), 2));
}

template <typename T>
ad::Var<T> forecast(TSModel<T>& model, const ad::Var<T>& x) {
  const TSConfig& cfg = model.config;
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != cfg.n_vars || s[2] != cfg.lookback)
    throw ShapeError("forecast input must be [B, " + std::to_string(cfg.n_vars) + ", " +
                     std::to_string(cfg.lookback) + "], got " + to_string(s));
  auto [z, st] = revin_normalize(x, static_cast<T>(cfg.revin_eps));
  ad::Var<T> h = patch_embed(model.embed, z);
  for (auto& b : model.blocks) h = ts_block_forward(b, cfg, h, model.mode, &model.dropout_rng);
  const std::size_t bm = s[0] * s[1];
  h = ad::reshape(h, {bm, cfg.d_model * cfg.tokens()});
  h = ad::bias_add(ad::matmul(h, model.head_w.var()), model.head_b.var(), 1);
  return revin_denormalize(ad::reshape(h, {s[0], s[1], cfg.horizon}), st);
}

template <typename T>
Tensor<T> predict_series(TSModel<T>& model, const Tensor<T>& x) {
  ad::NoGradGuard guard;
  const NormMode saved = model.mode;
  model.mode = NormMode::infer;
  Tensor<T> y = forecast(model, ad::Var<T>::constant(x)).value();
  model.mode = saved;
  return y;
}

template <typename T>
TSMetrics ts_metrics(const Tensor<T>& pred, const Tensor<T>& target) {
  if (!same_shape(pred, target))
    throw ShapeError("metrics shape mismatch: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  if (pred.empty()) throw ShapeError("metrics of empty tensors");
  double se = 0, ae = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    se += d * d;
    ae += std::abs(d);
  }
  const double n = static_cast<double>(pred.size());
  return {se / n, ae / n};
}

SeriesKind parse_series_kind(const std::string& s) {
  if (s == "sinusoid-mix") return SeriesKind::sinusoid_mix;
  if (s == "ar-process") return SeriesKind::ar_process;
  if (s == "trend+season") return SeriesKind::trend_season;
  throw ConfigError("unknown series kind '" + s + "' (expected sinusoid-mix, ar-process or trend+season)");
}

const char* to_string(SeriesKind k) {
  switch (k) {
    case SeriesKind::sinusoid_mix: return "sinusoid-mix";
    case SeriesKind::ar_process: return "ar-process";
    case SeriesKind::trend_season: return "trend+season";
  }
  return "?";
}

Tensor<float> synth_series(SeriesKind kind, std::size_t m, std::size_t length, std::uint64_t seed,
                           std::size_t min_length) {
  if (m == 0) throw ConfigError("need at least one variable");
  if (length == 0 || length < min_length)
    throw ConfigError("series length " + std::to_string(length) + " shorter than required " +
                      std::to_string(min_length));
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double two_pi = 2 * std::numbers::pi;
  Tensor<float> out({length, m});
  for (std::size_t v = 0; v < m; ++v) {
    switch (kind) {
      case SeriesKind::sinusoid_mix: {
        double period[3], amp[3], phase[3];
        for (int k = 0; k < 3; ++k) {
          period[k] = 8 + 56 * unit(rng);
          amp[k] = 0.5 + 1.5 * unit(rng);
          phase[k] = two_pi * unit(rng);
        }
        for (std::size_t t = 0; t < length; ++t) {
          double x = 0.1 * normal(rng);
          for (int k = 0; k < 3; ++k) x += amp[k] * std::sin(two_pi * static_cast<double>(t) / period[k] + phase[k]);
          out[t * m + v] = static_cast<float>(x);
        }
        break;
      }
      case SeriesKind::ar_process: {
        double x1 = 0, x2 = 0;
        for (std::size_t t = 0; t < length + 200; ++t) {
          const double x = 0.6 * x1 - 0.2 * x2 + normal(rng);
          x2 = x1;
          x1 = x;
          if (t >= 200) out[(t - 200) * m + v] = static_cast<float>(x);
        }
        break;
      }
      case SeriesKind::trend_season: {
        const double offset = 10 * (unit(rng) - 0.5);
        for (std::size_t t = 0; t < length; ++t) {
          const double td = static_cast<double>(t);
          out[t * m + v] = static_cast<float>(offset + 0.01 * td + 2 * std::sin(two_pi * td / 24) + 0.2 * normal(rng));
        }
        break;
      }
    }
  }
  return out;
}

WindowSet make_windows(const Tensor<float>& series, std::size_t lookback, std::size_t horizon, std::size_t step) {
  if (series.rank() != 2) throw ShapeError("series must be [T, M]");
  if (step == 0) throw ConfigError("window step must be positive");
  const std::size_t len = series.dim(0), m = series.dim(1);
  if (len < lookback + horizon)
    throw ConfigError("series of length " + std::to_string(len) + " too short for lookback " +
                      std::to_string(lookback) + " + horizon " + std::to_string(horizon));
  const std::size_t count = (len - lookback - horizon) / step + 1;
  WindowSet w{Tensor<float>({count, m, lookback}), Tensor<float>({count, m, horizon})};
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t0 = i * step;
    for (std::size_t v = 0; v < m; ++v) {
      for (std::size_t t = 0; t < lookback; ++t) w.inputs[(i * m + v) * lookback + t] = series[(t0 + t) * m + v];
      for (std::size_t t = 0; t < horizon; ++t)
        w.targets[(i * m + v) * horizon + t] = series[(t0 + lookback + t) * m + v];
    }
  }
  return w;
}

SeriesSplit split_series(const Tensor<float>& series, std::size_t lookback, std::size_t horizon, std::size_t step) {
  if (series.rank() != 2) throw ShapeError("series must be [T, M]");
  const std::size_t len = series.dim(0), m = series.dim(1);
  const std::size_t n_train = len * 7 / 10, n_val = len / 10;
  auto rows = [&](std::size_t a, std::size_t b) {
    Tensor<float> t({b - a, m});
    std::copy(series.data().begin() + static_cast<std::ptrdiff_t>(a * m),
              series.data().begin() + static_cast<std::ptrdiff_t>(b * m), t.data().begin());
    return t;
  };
  if (n_train < lookback + horizon || n_val + lookback < lookback + horizon ||
      len - n_train - n_val + lookback < lookback + horizon)
    throw ConfigError("series of length " + std::to_string(len) + " too short to split for lookback " +
                      std::to_string(lookback) + " + horizon " + std::to_string(horizon));
  SeriesSplit s;
  s.train = make_windows(rows(0, n_train), lookback, horizon, step);
  s.val = make_windows(rows(n_train - lookback, n_train + n_val), lookback, horizon, step);
  s.test = make_windows(rows(n_train + n_val - lookback, len), lookback, horizon, step);
  return s;
}

Tensor<float> repeat_last_baseline(const Tensor<float>& inputs, std::size_t horizon) {
  if (inputs.rank() != 3 || inputs.dim(2) == 0) throw ShapeError("inputs must be [B, M, L]");
  const std::size_t rows = inputs.dim(0) * inputs.dim(1), l = inputs.dim(2);
  Tensor<float> out({inputs.dim(0), inputs.dim(1), horizon});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t s = 0; s < horizon; ++s) out[r * horizon + s] = inputs[r * l + l - 1];
  return out;
}

namespace {

Tensor<float> gather_rows(const Tensor<float>& t, const std::vector<std::size_t>& idx) {
  const std::size_t per = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = idx.size();
  Tensor<float> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  return out;
}

}  // namespace

template <typename T>
TSMetrics evaluate_forecaster(TSModel<T>& model, const WindowSet& data, std::size_t batch_size) {
  if (data.size() == 0) throw ConfigError("empty window set");
  double se = 0, ae = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor<T> pred = predict_series(model, gather_rows(data.inputs, idx).template cast<T>());
    const TSMetrics m = ts_metrics(pred, gather_rows(data.targets, idx).template cast<T>());
    se += m.mse * static_cast<double>(pred.size());
    ae += m.mae * static_cast<double>(pred.size());
    count += pred.size();
  }
  return {se / static_cast<double>(count), ae / static_cast<double>(count)};
}

template <typename T>
TSTrainReport train_forecaster(TSModel<T>& model, const WindowSet& train, const WindowSet& val,
                               const TSTrainOptions& opts, TSTrainState<T>& state,
                               const std::function<bool(const TSEpochStats&)>& on_epoch) {
  if (train.size() == 0 || val.size() == 0) throw ConfigError("training and validation windows must be non-empty");
  if (opts.batch_size == 0) throw ConfigError("batch size must be positive");
  AdamWOptions ao;
  ao.lr = opts.lr;
  ao.weight_decay = opts.weight_decay;
  state.optimizer.set_options(ao);
  StateRefs<T> refs = model.state();
  TSTrainReport report;
  for (std::size_t epoch = state.epochs_done + 1; epoch <= opts.epochs; ++epoch) {
    if (opts.patience > 0 && state.bad_epochs >= opts.patience) {
      report.stopped_early = true;
      break;
    }
    const auto order = epoch_order(train.size(), opts.seed, epoch, true);
    std::seed_seq dseq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(epoch), 0xd40u};
    model.dropout_rng.seed(dseq);
    model.mode = NormMode::train;
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::vector<std::size_t> idx(
          order.begin() + static_cast<long>(start),
          order.begin() + static_cast<long>(std::min(order.size(), start + opts.batch_size)));
      const ad::Var<T> x = ad::Var<T>::constant(gather_rows(train.inputs, idx).template cast<T>());
      const ad::Var<T> y = ad::Var<T>::constant(gather_rows(train.targets, idx).template cast<T>());
      const ad::Var<T> loss = ad::mse(forecast(model, x), y);
      const double l = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(l)) throw NumericError("forecaster loss became non-finite at epoch " + std::to_string(epoch));
      state.optimizer.step(refs, ad::backward(loss));
      loss_sum += l;
      ++batches;
    }
    model.mode = NormMode::infer;
    const TSEpochStats st{epoch, loss_sum / static_cast<double>(batches), evaluate_forecaster(model, val).mse};
    if (st.val_mse < state.best_val) {
      state.best_val = st.val_mse;
      state.bad_epochs = 0;
    } else {
      ++state.bad_epochs;
    }
    state.epochs_done = epoch;
    report.epochs.push_back(st);
    if (on_epoch && !on_epoch(st)) break;
  }
  model.mode = NormMode::infer;
  return report;
}

#define FFNET_INSTANTIATE(T)                                                                                       \
  template struct TSModel<T>;                                                                                      \
  template std::pair<ad::Var<T>, RevINState<T>> revin_normalize<T>(const ad::Var<T>&, T);                          \
  template ad::Var<T> revin_denormalize<T>(const ad::Var<T>&, const RevINState<T>&);                               \
  template GroupedFFN<T> make_cviffn<T>(std::size_t, std::size_t, std::size_t, Rng&);                              \
  template GroupedFFN<T> make_ciffn<T>(std::size_t, std::size_t, std::size_t, Rng&);                               \
  template ad::Var<T> cviffn_forward<T>(const GroupedFFN<T>&, const ad::Var<T>&, std::size_t, T, T, Rng*);         \
  template ad::Var<T> ciffn_forward<T>(const GroupedFFN<T>&, const ad::Var<T>&, std::size_t, T, T, Rng*);          \
  template TSModel<T> build_ts_model<T>(const TSConfig&, std::uint64_t);                                           \
  template ad::Var<T> patch_embed<T>(const ConvParam<T>&, const ad::Var<T>&);                                      \
  template ad::Var<T> ts_block_forward<T>(TSBlock<T>&, const TSConfig&, const ad::Var<T>&, NormMode, Rng*);        \
  template ad::Var<T> forecast<T>(TSModel<T>&, const ad::Var<T>&);                                                 \
  template Tensor<T> predict_series<T>(TSModel<T>&, const Tensor<T>&);                                             \
  template TSMetrics ts_metrics<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template TSMetrics evaluate_forecaster<T>(TSModel<T>&, const WindowSet&, std::size_t);                           \
  template TSTrainReport train_forecaster<T>(TSModel<T>&, const WindowSet&, const WindowSet&,                      \
                                             const TSTrainOptions&, TSTrainState<T>&,                              \
                                             const std::function<bool(const TSEpochStats&)>&);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
