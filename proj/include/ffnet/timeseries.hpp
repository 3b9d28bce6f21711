#pragma once

// Time-series FFNet: RevIN, patch embedding, blocks built from CVIFFN /
// CIFFN grouped feed-forward layers and 1-D depthwise convolutions, and a
// flatten-linear forecast head.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ffnet/layers.hpp"
#include "ffnet/optim.hpp"

namespace ffnet {

struct TSConfig {
  std::size_t n_vars = 1;  // M
  std::size_t lookback = 96;
  std::size_t horizon = 96;  // S
  std::size_t d_model = 64;
  std::size_t expansion = 12;       // CIFFN
  std::size_t token_expansion = 1;  // CVIFFN inside the token mixer
  std::size_t blocks = 1;
  std::size_t patch = 4;
  std::size_t stride = 2;
  std::size_t token_kernel = 51;
  std::size_t channel_kernel = 3;
  double layer_scale_init = 1e-6;
  double drop1 = 0;
  double drop2 = 0;
  double revin_eps = 1e-5;

  void validate() const;
  /// N = (L - patch) / stride + 1.
  std::size_t tokens() const { return (lookback - patch) / stride + 1; }
};

template <typename T>
struct RevINState {
  Tensor<T> mean;  // [B, M]
  Tensor<T> std;   // [B, M], sqrt(var + eps)
  T epsilon = T(1e-5);
};

/// Standardizes every variable over the lookback axis of x [B, M, L].
/// Statistics are treated as constants for differentiation.
template <typename T>
std::pair<ad::Var<T>, RevINState<T>> revin_normalize(const ad::Var<T>& x, T eps = T(1e-5));
/// y [B, M, S] * std + mean.
template <typename T>
ad::Var<T> revin_denormalize(const ad::Var<T>& y, const RevINState<T>& state);

/// fc1 / fc2 are 1x1 grouped conv1d layers; see cviffn_forward / ciffn_forward.
template <typename T>
struct GroupedFFN {
  ConvParam<T> fc1;
  ConvParam<T> fc2;
};

/// Cross-variable: fc1 grouped by d_model over (D*M) channels, expanding
/// to D*e_r*M; GELU; regroup; fc2 grouped by n_vars.
template <typename T>
GroupedFFN<T> make_cviffn(std::size_t n_vars, std::size_t d_model, std::size_t e_r, Rng& rng);
/// Channel: fc1 grouped by n_vars expanding D -> D*e_r; GELU; regroup;
/// fc2 grouped by d_model.
template <typename T>
GroupedFFN<T> make_ciffn(std::size_t n_vars, std::size_t d_model, std::size_t e_r, Rng& rng);

/// x [B, M, D, N] -> [B, M, D, N]. `rng` is only used when a drop rate is nonzero.
template <typename T>
ad::Var<T> cviffn_forward(const GroupedFFN<T>& p, const ad::Var<T>& x, std::size_t e_r, T drop1 = T(0),
                          T drop2 = T(0), Rng* rng = nullptr);
template <typename T>
ad::Var<T> ciffn_forward(const GroupedFFN<T>& p, const ad::Var<T>& x, std::size_t e_r, T drop1 = T(0),
                         T drop2 = T(0), Rng* rng = nullptr);

template <typename T>
struct TSBlock {
  BNParam<T> norm1;  // over M*D slots
  GroupedFFN<T> cviffn;
  ConvParam<T> dw1, dw2;  // depthwise, token_kernel
  Param<T> ls1;           // [D]
  BNParam<T> norm2;
  ConvParam<T> dw3;  // depthwise, channel_kernel
  GroupedFFN<T> ciffn;
  Param<T> ls2;
};

template <typename T>
struct TSModel {
  TSConfig config;
  ConvParam<T> embed;  // conv1d weight [D, 1, patch], stride
  std::vector<TSBlock<T>> blocks;
  Param<T> head_w;  // [D*N, S]
  Param<T> head_b;  // [S]
  NormMode mode = NormMode::infer;
  Rng dropout_rng{0};

  StateRefs<T> state();
};

template <typename T>
TSModel<T> build_ts_model(const TSConfig& cfg, std::uint64_t seed);

/// x [B, M, L] -> [B, M, D, N].
template <typename T>
ad::Var<T> patch_embed(const ConvParam<T>& embed, const ad::Var<T>& x);

template <typename T>
ad::Var<T> ts_block_forward(TSBlock<T>& b, const TSConfig& cfg, const ad::Var<T>& x, NormMode mode,
                            Rng* rng = nullptr);

/// x [B, M, L] -> [B, M, S].
template <typename T>
ad::Var<T> forecast(TSModel<T>& model, const ad::Var<T>& x);
template <typename T>
Tensor<T> predict_series(TSModel<T>& model, const Tensor<T>& x);

struct TSMetrics {
  double mse = 0;
  double mae = 0;
};

template <typename T>
TSMetrics ts_metrics(const Tensor<T>& pred, const Tensor<T>& target);

enum class SeriesKind { sinusoid_mix, ar_process, trend_season };
SeriesKind parse_series_kind(const std::string& s);
const char* to_string(SeriesKind k);

/// [length, M]. sinusoid_mix: per variable three sines with periods in
/// [8, 64], amplitudes in [0.5, 2], random phases, noise std 0.1.
/// ar_process: x_t = 0.6 x_{t-1} - 0.2 x_{t-2} + N(0, 1) after 200 burn-in
/// steps. trend_season: 0.01 t + 2 sin(2 pi t / 24) + N(0, 0.2), with a
/// random offset per variable.
Tensor<float> synth_series(SeriesKind kind, std::size_t n_vars, std::size_t length, std::uint64_t seed,
                           std::size_t min_length = 0);

/// Sliding windows over series [T, M]: inputs [W, M, L], targets [W, M, S].
struct WindowSet {
  Tensor<float> inputs;
  Tensor<float> targets;
  std::size_t size() const { return inputs.empty() ? 0 : inputs.dim(0); }
};
WindowSet make_windows(const Tensor<float>& series, std::size_t lookback, std::size_t horizon, std::size_t step = 1);

struct SeriesSplit {
  WindowSet train, val, test;
};
/// Chronological 70/10/20 split; val and test windows start with the
/// lookback preceding their segment.
SeriesSplit split_series(const Tensor<float>& series, std::size_t lookback, std::size_t horizon,
                         std::size_t step = 1);

/// Repeats the last observed value of every variable: [B, M, S].
Tensor<float> repeat_last_baseline(const Tensor<float>& inputs, std::size_t horizon);

struct TSTrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 0;
  std::size_t patience = 3;  // 0 disables early stopping
  std::uint64_t seed = 0;
};

struct TSEpochStats {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_mse = 0;
};

template <typename T>
struct TSTrainState {
  AdamW<T> optimizer;
  std::size_t epochs_done = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
};

struct TSTrainReport {
  std::vector<TSEpochStats> epochs;
  bool stopped_early = false;
};

/// MSE on denormalized forecasts with AdamW; validation MSE in infer mode
/// after every epoch drives early stopping.
template <typename T>
TSTrainReport train_forecaster(TSModel<T>& model, const WindowSet& train, const WindowSet& val,
                               const TSTrainOptions& opts, TSTrainState<T>& state,
                               const std::function<bool(const TSEpochStats&)>& on_epoch = {});

template <typename T>
TSMetrics evaluate_forecaster(TSModel<T>& model, const WindowSet& data, std::size_t batch_size = 64);

}  // namespace ffnet
