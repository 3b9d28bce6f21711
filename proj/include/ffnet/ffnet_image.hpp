#pragma once

// FFNet image classifier: stem, staged FFNet blocks (FFNified-attention
// token mixer + ConvNeXt channel mixer), downsampling, pooled linear head.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ffnet/datasets.hpp"
#include "ffnet/layers.hpp"
#include "ffnet/optim.hpp"

namespace ffnet {

using KernelShape = std::pair<std::size_t, std::size_t>;

struct StageConfig {
  std::size_t depth = 1;
  std::size_t channels = 0;
  std::size_t token_kernel = 3;
  std::size_t channel_kernel = 3;
  double expansion = 3.0;
};

struct FFNetConfig {
  std::string name = "custom";
  std::size_t in_channels = 3;
  std::pair<std::size_t, std::size_t> stem{64, 80};
  std::vector<StageConfig> stages;
  std::size_t num_classes = 1000;
  double layer_scale_init = 1e-6;
  /// Per stage: auxiliary kernel shapes added next to every depthwise conv
  /// of that stage whose kernel can contain them.
  std::vector<std::vector<KernelShape>> branches;
  std::size_t downsample_kernel = 7;
  PadFill fill = PadFill::zeros;

  void validate() const;
  /// Input side lengths must be multiples of this.
  std::size_t resolution_divisor() const { return std::size_t{4} << (stages.size() - 1); }
};

/// FFNet-1 .. FFNet-4.
FFNetConfig ffnet_variant(int v);
/// Accepts "FFNet-1" .. "FFNet-4" (case-insensitive, "ffnet1" also works).
FFNetConfig ffnet_variant(const std::string& name);
/// Adds a 3x3 auxiliary branch in every stage whose token kernel is >= 7.
FFNetConfig with_default_branches(FFNetConfig cfg);
/// Large-kernel stages become 9x9 with 3x3, 9x1 and 1x9 auxiliaries.
FFNetConfig with_segmentation_branches(FFNetConfig cfg);
/// Four stages, channels [16,32,64,128], depth 1, 2 classes.
FFNetConfig toy_config(std::size_t num_classes = 2);
/// Same depth and widths, every spatial kernel 3x3 and no branches.
FFNetConfig ablation_3x3(FFNetConfig cfg);

template <typename T>
struct TokenMixer {
  BranchedConv<T> proj;  // 1x1
  BranchedConv<T> dw1;   // query-key
  BranchedConv<T> dw2;   // coefficient-value
  Param<T> layer_scale;
};

template <typename T>
struct ChannelMixer {
  BranchedConv<T> dw;
  ConvParam<T> expand;
  ConvParam<T> reduce;
  Param<T> layer_scale;
};

template <typename T>
struct Block {
  TokenMixer<T> token;
  ChannelMixer<T> channel;
};

template <typename T>
struct Downsample {
  BranchedConv<T> dw;  // strided depthwise
  BranchedConv<T> pw;
};

template <typename T>
struct FFNetModel {
  FFNetConfig config;
  BranchedConv<T> stem1, stem2;
  std::vector<std::vector<Block<T>>> stages;
  std::vector<Downsample<T>> downsamples;  // before stages 2..n
  Param<T> head_w;  // [C, num_classes]
  Param<T> head_b;
  NormMode mode = NormMode::infer;

  StateRefs<T> state();
  std::size_t block_count() const;
  Block<T>& block(std::size_t flat_index);
};

/// Intermediate values recorded by forward(), one entry per block in order.
template <typename T>
struct FeatureTrace {
  std::vector<Tensor<T>> channel_mixer_inputs;  // [B, C, H, W]
  std::vector<Tensor<T>> coefficients;          // gelu(expand(...)), [B, rC, H, W]
  std::vector<Tensor<T>> pre_activations;       // expand(...) before gelu
};

template <typename T>
FFNetModel<T> build_ffnet(const FFNetConfig& cfg, std::uint64_t seed);

template <typename T>
ad::Var<T> stem_forward(FFNetModel<T>& m, const ad::Var<T>& x);
template <typename T>
ad::Var<T> downsample_forward(Downsample<T>& d, const ad::Var<T>& x, NormMode mode);
template <typename T>
ad::Var<T> block_forward(Block<T>& b, const ad::Var<T>& x, NormMode mode, FeatureTrace<T>* trace = nullptr);
/// Output of the last stage, before pooling.
template <typename T>
ad::Var<T> forward_features(FFNetModel<T>& m, const ad::Var<T>& x, FeatureTrace<T>* trace = nullptr);
/// Logits [B, num_classes].
template <typename T>
ad::Var<T> forward(FFNetModel<T>& m, const ad::Var<T>& x, FeatureTrace<T>* trace = nullptr);
/// Inference without graph recording.
template <typename T>
Tensor<T> predict(FFNetModel<T>& m, const Tensor<T>& images);

/// Trainable scalars including norms, biases and LayerScale. Running
/// statistics are not counted.
template <typename T>
std::size_t count_params(const FFNetModel<T>& m);

/// Multiply-accumulates (1 MAC = 1 FLOP) of every conv and the head.
template <typename T>
std::size_t estimate_flops(const FFNetModel<T>& m, std::size_t height, std::size_t width);

/// Random BN affine parameters and running statistics, and LayerScale
/// drawn from [ls_lo, ls_hi]. Makes equivalence checks non-trivial on
/// freshly built models.
template <typename T>
void randomize_statistics(FFNetModel<T>& m, std::uint64_t seed, double ls_lo = 0.1, double ls_hi = 0.5);

/// Element-wise cast of every parameter and statistic.
template <typename U, typename T>
FFNetModel<U> cast_model(const FFNetModel<T>& m);

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;        // mean training loss over the epoch
  double accuracy = 0;    // infer-mode accuracy on the training set after the epoch
};

template <typename T>
struct TrainState {
  AdamW<T> optimizer;
  std::size_t epochs_done = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
};

/// Cross-entropy training with AdamW. Continues from `state` when it is
/// non-empty; the shuffle order of epoch e depends only on (seed, e).
/// `on_epoch` may return false to stop early.
template <typename T>
TrainReport train_toy(FFNetModel<T>& model, const ImageDataset& data, const TrainOptions& opts, TrainState<T>& state,
                      const std::function<bool(const EpochStats&)>& on_epoch = {});

template <typename T>
double evaluate_accuracy(FFNetModel<T>& model, const ImageDataset& data, std::size_t batch_size = 64);

/// Epoch-dependent permutation used by the trainers.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle);

}  // namespace ffnet
