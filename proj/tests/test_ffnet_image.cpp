#include <gtest/gtest.h>

#include <cmath>

#include "ffnet/ffnet_image.hpp"
#include "oracles.hpp"

using namespace ffnet;
using ad::Var;

namespace {

// Hand-derived parameter count. Every BranchedConv is a bias-free conv
// plus BN (gamma, beta); the channel-mixer expand/reduce convs carry a
// bias; LayerScale is one vector per mixer.
std::size_t closed_form_params(const FFNetConfig& cfg) {
  auto bconv = [](std::size_t out, std::size_t in_per_group, std::size_t kh, std::size_t kw) {
    return out * in_per_group * kh * kw + 2 * out;
  };
  std::size_t n = bconv(cfg.stem.first, cfg.in_channels, 3, 3) + bconv(cfg.stem.second, cfg.stem.first, 3, 3);
  std::size_t prev = cfg.stem.second;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::size_t c = st.channels, h = static_cast<std::size_t>(std::round(st.expansion * double(c)));
    if (s > 0) n += bconv(prev, 1, cfg.downsample_kernel, cfg.downsample_kernel) + bconv(c, prev, 1, 1);
    std::size_t aux_token = 0, aux_channel = 0;
    if (!cfg.branches.empty())
      for (auto [ah, aw] : cfg.branches[s]) {
        if (ah <= st.token_kernel && aw <= st.token_kernel && !(ah == st.token_kernel && aw == st.token_kernel))
          aux_token += bconv(c, 1, ah, aw);
        if (ah <= st.channel_kernel && aw <= st.channel_kernel &&
            !(ah == st.channel_kernel && aw == st.channel_kernel))
          aux_channel += bconv(c, 1, ah, aw);
      }
    const std::size_t token = bconv(c, c, 1, 1) + 2 * (bconv(c, 1, st.token_kernel, st.token_kernel) + aux_token) + c;
    const std::size_t channel =
        bconv(c, 1, st.channel_kernel, st.channel_kernel) + aux_channel + (h * c + h) + (c * h + c) + c;
    n += st.depth * (token + channel);
    prev = c;
  }
  return n + prev * cfg.num_classes + cfg.num_classes;
}

std::size_t closed_form_macs(const FFNetConfig& cfg, std::size_t hw) {
  std::size_t r = hw / 2, n = cfg.stem.first * cfg.in_channels * 9 * r * r;
  r /= 2;
  n += cfg.stem.second * cfg.stem.first * 9 * r * r;
  std::size_t prev = cfg.stem.second;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::size_t c = st.channels, h = static_cast<std::size_t>(std::round(st.expansion * double(c)));
    if (s > 0) {
      r /= 2;
      n += prev * cfg.downsample_kernel * cfg.downsample_kernel * r * r + c * prev * r * r;
    }
    const std::size_t per_pixel =
        c * c + 2 * c * st.token_kernel * st.token_kernel + c * st.channel_kernel * st.channel_kernel + 2 * c * h;
    n += st.depth * per_pixel * r * r;
    prev = c;
  }
  return n + prev * cfg.num_classes;
}

FFNetConfig tiny_config() {
  FFNetConfig cfg = toy_config(3);
  cfg.stem = {4, 8};
  const std::size_t widths[] = {8, 16, 32, 64};
  for (std::size_t i = 0; i < 4; ++i) cfg.stages[i].channels = widths[i];
  cfg.validate();
  return cfg;
}

bool within(double value, double reference, double frac) { return std::abs(value - reference) <= frac * reference; }

}  // namespace

TEST(FFNetParams, VariantsMatchClosedForm) {
  for (int v = 1; v <= 4; ++v) {
    const FFNetConfig cfg = ffnet_variant(v);
    const auto m = build_ffnet<float>(cfg, 0);
    EXPECT_EQ(count_params(m), closed_form_params(cfg)) << cfg.name;
    const FFNetConfig br = with_default_branches(cfg);
    EXPECT_EQ(count_params(build_ffnet<float>(br, 0)), closed_form_params(br)) << br.name;
  }
  const FFNetConfig toy = toy_config();
  EXPECT_EQ(count_params(build_ffnet<float>(toy, 0)), closed_form_params(toy));
}

TEST(FFNetParams, VariantsWithinTenPercentOfPublished) {
  const double published[] = {13.7e6, 26.9e6, 48.3e6, 79.2e6};
  for (int v = 1; v <= 4; ++v) {
    const double n = double(closed_form_params(ffnet_variant(v)));
    EXPECT_TRUE(within(n, published[v - 1], 0.10)) << "FFNet-" << v << ": " << n;
  }
}

TEST(FFNetParams, SingleConvWithBias) {
  Rng rng(1);
  const auto c = make_conv<float>(8, 4, 3, 3, ConvGeometry{1, Padding::same(3, 3), 1}, true, rng);
  StateRefs<float> refs;
  ConvParam<float> copy = c;
  refs.add("conv", copy);
  EXPECT_EQ(refs.param_count(), 296u);
}

TEST(FFNetFlops, VariantsWithinFifteenPercentOfPublished) {
  struct Row {
    int v;
    std::size_t hw;
    double gflops;
  };
  for (const Row& r : {Row{1, 256, 2.9}, Row{2, 256, 6.0}, Row{3, 256, 10.1}, Row{3, 384, 22.8}, Row{4, 384, 43.1}}) {
    const FFNetConfig cfg = ffnet_variant(r.v);
    const auto m = build_ffnet<float>(cfg, 0);
    const std::size_t macs = estimate_flops(m, r.hw, r.hw);
    EXPECT_EQ(macs, closed_form_macs(cfg, r.hw)) << cfg.name;
    EXPECT_TRUE(within(double(macs) / 1e9, r.gflops, 0.15)) << cfg.name << " at " << r.hw << ": " << macs;
  }
}

TEST(FFNetFlops, PointwiseConvIsCCHW) {
  EXPECT_EQ(conv_macs({24, 24, 1, 1}, 7, 5), 24u * 24 * 7 * 5);
  EXPECT_EQ(conv_macs({24, 1, 3, 3}, 7, 5), 24u * 9 * 7 * 5);
}

TEST(FFNetFlops, IndivisibleResolutionThrows) {
  const auto m = build_ffnet<float>(toy_config(), 0);
  EXPECT_THROW(estimate_flops(m, 48, 48), ShapeError);
}

TEST(Stem, QuartersResolution) {
  auto m = build_ffnet<float>(ffnet_variant(1), 0);
  Rng rng(2);
  const auto y = stem_forward(m, Var<float>::constant(randn<float>({2, 3, 32, 32}, rng)));
  EXPECT_EQ(y.shape(), (Shape{2, 80, 8, 8}));
  EXPECT_THROW(stem_forward(m, Var<float>::constant(Tensor<float>({1, 3, 30, 32}))), ShapeError);
  EXPECT_THROW(stem_forward(m, Var<float>::constant(Tensor<float>({1, 4, 32, 32}))), ShapeError);
}

TEST(Stem, ZeroInputGivesBetaPathConstant) {
  auto m = build_ffnet<double>(tiny_config(), 3);
  Rng rng(4);
  auto& bn = *m.stem2.main.bn;
  bn.beta.value() = uniform<double>({8}, rng, -1.0, 1.0);
  bn.gamma.value() = uniform<double>({8}, rng, 0.5, 1.5);
  bn.running_mean = uniform<double>({8}, rng, -0.3, 0.3);
  bn.running_var = uniform<double>({8}, rng, 0.5, 2.0);
  const auto y = stem_forward(m, Var<double>::constant(Tensor<double>({1, 3, 16, 16}))).value();
  for (std::size_t c = 0; c < 8; ++c) {
    const double pre = (0.0 - bn.running_mean[c]) * bn.gamma.value()[c] / std::sqrt(bn.running_var[c] + bn.epsilon) +
                       bn.beta.value()[c];
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[c * 16 + i], oracle::gelu(pre), 1e-12);
  }
}

TEST(Stem, GradientCheck) {
  auto m = build_ffnet<double>(tiny_config(), 5);
  randomize_statistics(m, 6);
  Rng rng(7);
  const auto proj = Var<double>::constant(randn<double>({1, 8, 2, 2}, rng));
  const auto r = ad::grad_check([&](const Var<double>& x) { return ad::sum(ad::mul(stem_forward(m, x), proj)); },
                                randn<double>({1, 3, 8, 8}, rng), 1e-4);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(Downsample, HalvesResolutionAndDoublesChannels) {
  auto m = build_ffnet<float>(ffnet_variant(1), 0);
  Rng rng(8);
  const auto y = downsample_forward(m.downsamples[0], Var<float>::constant(randn<float>({1, 80, 16, 16}, rng)),
                                    NormMode::infer);
  EXPECT_EQ(y.shape(), (Shape{1, 160, 8, 8}));
  EXPECT_THROW(downsample_forward(m.downsamples[0], Var<float>::constant(Tensor<float>({1, 80, 15, 16})),
                                  NormMode::infer),
               ShapeError);
}

TEST(Downsample, DeltaKernelIsStridedSubsampleThenPointwise) {
  auto m = build_ffnet<double>(tiny_config(), 9);
  Downsample<double>& d = m.downsamples[0];
  Tensor<double>& w = d.dw.main.conv.weight.value();
  w.fill(0.0);
  const std::size_t k = w.dim(2);
  for (std::size_t c = 0; c < w.dim(0); ++c) w[(c * k + k / 2) * k + k / 2] = 1.0;
  Rng rng(10);
  const auto x = randn<double>({2, 8, 8, 8}, rng);
  const auto y = downsample_forward(d, Var<double>::constant(x), NormMode::infer).value();
  const Tensor<double>& pw = d.pw.main.conv.weight.value();
  const double bn_scale = 1.0 / std::sqrt((1.0 + d.dw.main.bn->epsilon) * (1.0 + d.pw.main.bn->epsilon));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t o = 0; o < 16; ++o)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < 8; ++c) acc += pw[o * 8 + c] * x.at({b, c, 2 * i, 2 * j});
          EXPECT_NEAR(y.at({b, o, i, j}), acc * bn_scale, 1e-12);
        }
}

TEST(Downsample, GradientCheck) {
  auto m = build_ffnet<double>(tiny_config(), 11);
  randomize_statistics(m, 12);
  Rng rng(13);
  const auto proj = Var<double>::constant(randn<double>({1, 16, 3, 3}, rng));
  const auto r = ad::grad_check(
      [&](const Var<double>& x) {
        return ad::sum(ad::mul(downsample_forward(m.downsamples[0], x, NormMode::infer), proj));
      },
      randn<double>({1, 8, 6, 6}, rng), 1e-4);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(Block, GradientCheckAndShape) {
  auto m = build_ffnet<double>(tiny_config(), 14);
  randomize_statistics(m, 15);
  Rng rng(16);
  const auto proj = Var<double>::constant(randn<double>({1, 32, 4, 4}, rng));
  Block<double>& blk = m.stages[2][0];
  const auto r = ad::grad_check(
      [&](const Var<double>& x) {
        const auto y = block_forward(blk, x, NormMode::infer);
        EXPECT_EQ(y.shape(), x.shape());
        return ad::sum(ad::mul(y, proj));
      },
      randn<double>({1, 32, 4, 4}, rng), 1e-4);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(Forward, FFNet1LogitsShapeAndFinite) {
  auto m = build_ffnet<float>(ffnet_variant(1), 0);
  Rng rng(17);
  const auto logits = predict(m, randn<float>({1, 3, 64, 64}, rng));
  EXPECT_EQ(logits.shape(), (Shape{1, 1000}));
  EXPECT_TRUE(logits.all_finite());
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
  auto m = build_ffnet<float>(toy_config(5), 18);
  randomize_statistics(m, 19);
  Rng rng(20);
  const auto img = randn<float>({1, 3, 32, 32}, rng);
  Tensor<float> batch({2, 3, 32, 32});
  for (std::size_t i = 0; i < img.size(); ++i) batch[i] = batch[img.size() + i] = img[i];
  const auto y = predict(m, batch);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(y[k], y[5 + k], 1e-6);
}

TEST(Forward, BatchConsistent) {
  auto m = build_ffnet<float>(toy_config(4), 21);
  randomize_statistics(m, 22);
  Rng rng(23);
  const auto batch = randn<float>({3, 3, 32, 32}, rng);
  const auto all = predict(m, batch);
  const std::size_t per = 3 * 32 * 32;
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor<float> one({1, 3, 32, 32});
    for (std::size_t i = 0; i < per; ++i) one[i] = batch[b * per + i];
    const auto y = predict(m, one);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(all[b * 4 + k], y[k], 1e-5);
  }
}

TEST(Forward, IndivisibleResolutionThrows) {
  auto m = build_ffnet<float>(toy_config(), 0);
  EXPECT_THROW(predict(m, Tensor<float>({1, 3, 48, 48})), ShapeError);
}

TEST(Forward, ZeroLayerScaleMakesStageIdentity) {
  auto m = build_ffnet<double>(tiny_config(), 24);
  randomize_statistics(m, 25);
  Rng rng(26);
  const auto x = randn<double>({2, 16, 4, 4}, rng);
  auto& stage = m.stages[1];
  for (auto& blk : stage) {
    blk.token.layer_scale.value().fill(0.0);
    blk.channel.layer_scale.value().fill(0.0);
  }
  Var<double> y = Var<double>::constant(x);
  for (auto& blk : stage) y = block_forward(blk, y, NormMode::infer);
  EXPECT_LE(max_abs_diff(y.value(), x), 1e-6);
}

TEST(Forward, TraceRecordsEveryBlock) {
  auto m = build_ffnet<float>(toy_config(), 27);
  Rng rng(28);
  FeatureTrace<float> trace;
  forward(m, Var<float>::constant(randn<float>({2, 3, 32, 32}, rng)), &trace);
  ASSERT_EQ(trace.coefficients.size(), m.block_count());
  EXPECT_EQ(trace.coefficients[0].shape(), (Shape{2, 48, 8, 8}));
  EXPECT_EQ(trace.channel_mixer_inputs[3].shape(), (Shape{2, 128, 1, 1}));
}

TEST(Build, DeterministicPerSeed) {
  const auto a = build_ffnet<float>(toy_config(), 29), b = build_ffnet<float>(toy_config(), 29),
             c = build_ffnet<float>(toy_config(), 30);
  auto ra = const_cast<FFNetModel<float>&>(a).state(), rb = const_cast<FFNetModel<float>&>(b).state(),
       rc = const_cast<FFNetModel<float>&>(c).state();
  bool differs = false;
  for (std::size_t i = 0; i < ra.params.size(); ++i) {
    EXPECT_EQ(ra.params[i].param->value().vec(), rb.params[i].param->value().vec()) << ra.params[i].name;
    differs = differs || ra.params[i].param->value().vec() != rc.params[i].param->value().vec();
  }
  EXPECT_TRUE(differs);
}

TEST(Build, CustomOneStageConfigRuns) {
  FFNetConfig cfg;
  cfg.stem = {4, 8};
  cfg.stages = {StageConfig{1, 8, 3, 3, 2.0}};
  cfg.num_classes = 3;
  auto m = build_ffnet<double>(cfg, 31);
  EXPECT_EQ(cfg.resolution_divisor(), 4u);
  Rng rng(32);
  const auto y = predict(m, randn<double>({2, 3, 8, 8}, rng));
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  EXPECT_TRUE(y.all_finite());
  EXPECT_EQ(count_params(m), closed_form_params(cfg));
}

TEST(Build, InvalidConfigsThrow) {
  auto bad = [](auto edit) {
    FFNetConfig cfg = toy_config();
    edit(cfg);
    EXPECT_THROW(build_ffnet<float>(cfg, 0), ConfigError);
  };
  bad([](FFNetConfig& c) { c.stem.second = 12; });
  bad([](FFNetConfig& c) { c.stages[1].channels = 8; });
  bad([](FFNetConfig& c) { c.stages[2].depth = 0; });
  bad([](FFNetConfig& c) { c.stages[2].token_kernel = 6; });
  bad([](FFNetConfig& c) { c.stages.clear(); });
  bad([](FFNetConfig& c) { c.num_classes = 0; });
  bad([](FFNetConfig& c) { c.branches = {{}, {}}; });
  bad([](FFNetConfig& c) { c.downsample_kernel = 4; });
  EXPECT_THROW(ffnet_variant(5), ConfigError);
  EXPECT_THROW(ffnet_variant("FFNet-9"), ConfigError);
  EXPECT_EQ(ffnet_variant("ffnet3").stages[2].depth, 22u);
}

TEST(Build, VariantTable) {
  const std::size_t c1[] = {80, 88, 96, 128};
  const std::size_t depths[4][4] = {{2, 2, 8, 2}, {3, 3, 15, 3}, {4, 4, 22, 5}, {4, 4, 27, 3}};
  for (int v = 1; v <= 4; ++v) {
    const FFNetConfig cfg = ffnet_variant(v);
    for (std::size_t s = 0; s < 4; ++s) {
      EXPECT_EQ(cfg.stages[s].channels, c1[v - 1] << s);
      EXPECT_EQ(cfg.stages[s].depth, depths[v - 1][s]);
      EXPECT_EQ(cfg.stages[s].token_kernel, s < 2 ? 3u : 7u);
      EXPECT_EQ(cfg.stages[s].channel_kernel, v == 1 ? 3u : 7u);
      EXPECT_EQ(cfg.stages[s].expansion, 3.0);
    }
  }
}

TEST(Train, ZeroLearningRateLeavesParametersAndLoss) {
  const ImageDataset data = make_shapes_dataset(24, 32, 33);
  auto m = build_ffnet<float>(toy_config(), 34);
  auto before = m.state();
  std::vector<std::vector<float>> snapshot;
  for (auto& p : before.params) snapshot.push_back(p.param->value().vec());
  TrainOptions o;
  o.epochs = 3;
  o.batch_size = 8;
  o.lr = 0;
  o.shuffle = false;
  TrainState<float> st;
  const auto rep = train_toy(m, data, o, st);
  auto after = m.state();
  for (std::size_t i = 0; i < snapshot.size(); ++i) EXPECT_EQ(after.params[i].param->value().vec(), snapshot[i]);
  ASSERT_EQ(rep.epochs.size(), 3u);
  for (const auto& e : rep.epochs) EXPECT_EQ(e.loss, rep.epochs[0].loss);
}

TEST(Train, SameSeedSameCurve) {
  const ImageDataset data = make_shapes_dataset(24, 32, 35);
  TrainOptions o;
  o.epochs = 2;
  o.batch_size = 8;
  o.seed = 36;
  auto run = [&] {
    auto m = build_ffnet<float>(toy_config(), 37);
    TrainState<float> st;
    std::vector<double> losses;
    for (const auto& e : train_toy(m, data, o, st).epochs) losses.push_back(e.loss);
    return losses;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 2u);
}

TEST(Train, RejectsBadInputs) {
  auto m = build_ffnet<float>(toy_config(), 38);
  TrainState<float> st;
  TrainOptions o;
  o.epochs = 1;
  EXPECT_THROW(train_toy(m, ImageDataset{}, o, st), Error);
  o.batch_size = 0;
  EXPECT_THROW(train_toy(m, make_shapes_dataset(8, 32, 39), o, st), ConfigError);
}

TEST(Train, EpochOrderDependsOnSeedAndEpochOnly) {
  EXPECT_EQ(epoch_order(50, 1, 3, true), epoch_order(50, 1, 3, true));
  EXPECT_NE(epoch_order(50, 1, 3, true), epoch_order(50, 1, 4, true));
  auto sorted = epoch_order(50, 1, 3, true);
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, epoch_order(50, 1, 3, false));
}
