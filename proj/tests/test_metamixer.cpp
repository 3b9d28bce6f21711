#include <gtest/gtest.h>

#include "ffnet/metamixer.hpp"
#include "oracles.hpp"

using namespace ffnet;

namespace {

template <typename T>
Tensor<T> tokens_of(const Tensor<T>& x) {  // [1,C,H,W] -> [HW, C]
  const std::size_t C = x.dim(1), P = x.dim(2) * x.dim(3);
  Tensor<T> t({P, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) t[p * C + c] = x[c * P + p];
  return t;
}

template <typename T>
Tensor<T> swap_rows(const Tensor<T>& x, std::size_t i, std::size_t j) {
  Tensor<T> y = x;
  const std::size_t d = x.dim(1);
  for (std::size_t c = 0; c < d; ++c) std::swap(y[i * d + c], y[j * d + c]);
  return y;
}

template <typename T>
ConvLayer<T> delta_dw(std::size_t c, std::size_t k, PadFill fill = PadFill::zeros) {
  ConvLayer<T> l{Tensor<T>({c, 1, k, k}), {}, ConvGeometry{1, Padding::same(k, k, fill), c}};
  for (std::size_t i = 0; i < c; ++i) l.weight.at({i, 0, k / 2, k / 2}) = T(1);
  return l;
}

template <typename T>
ConvLayer<T> identity_pw(std::size_t c) {
  ConvLayer<T> l{Tensor<T>({c, c, 1, 1}), {}, ConvGeometry{1, Padding{}, 1}};
  for (std::size_t i = 0; i < c; ++i) l.weight.at({i, i, 0, 0}) = T(1);
  return l;
}

template <typename T>
Tensor<double> ffnified_oracle(const Tensor<T>& x, const FFNifiedParams<T>& p) {
  Tensor<double> h = oracle::conv2d(x, p.proj);
  const auto cast = [](const ConvLayer<T>& l) {
    return ConvLayer<double>{l.weight.template cast<double>(), l.bias.template cast<double>(), l.geometry};
  };
  h = oracle::conv2d(h, cast(p.keys));
  oracle::gelu_inplace(h);
  return oracle::conv2d(h, cast(p.values));
}

template <typename T>
Tensor<double> convnext_oracle(const Tensor<T>& x, const ConvNeXtParams<T>& p) {
  const auto cast = [](const ConvLayer<T>& l) {
    return ConvLayer<double>{l.weight.template cast<double>(), l.bias.template cast<double>(), l.geometry};
  };
  Tensor<double> h = oracle::batchnorm(oracle::conv2d(x, p.dw), p.norm);
  h = oracle::conv2d(h, cast(p.expand));
  oracle::gelu_inplace(h);
  return oracle::conv2d(h, cast(p.reduce));
}

template <typename T>
struct Sweep {
  static constexpr double tol = std::is_same_v<T, float> ? 1e-6 : 1e-10;
};

}  // namespace

TEST(AttentionReference, SingleTokenReturnsValueRow) {
  Rng rng(1);
  const auto p = random_attention<double>(8, 2, rng);
  const auto x = randn<double>({1, 8}, rng);
  EXPECT_LE(max_abs_diff(self_attention_reference(x, p), oracle::matmul(x, p.w_v)), 1e-12);
}

TEST(AttentionReference, PermutationEquivariant) {
  Rng rng(2);
  const auto p = random_attention<double>(8, 2, rng);
  const auto x = randn<double>({5, 8}, rng);
  const auto y = self_attention_reference(x, p);
  EXPECT_LE(max_abs_diff(self_attention_reference(swap_rows(x, 0, 3), p), swap_rows(y, 0, 3)), 1e-12);
}

TEST(AttentionReference, MatchesStepwiseOracle) {
  Rng rng(3);
  const auto p = random_attention<double>(8, 2, rng);
  const auto x = randn<double>({5, 8}, rng);
  EXPECT_LE(max_abs_diff(self_attention_reference(x, p), oracle::attention(x, p.w_q, p.w_k, p.w_v, 2)), 1e-9);
  AttentionParams<double> bad = p;
  bad.heads = 3;
  EXPECT_THROW(self_attention_reference(x, bad), ShapeError);
}

TEST(AttentionReference, ArgmaxInvariantToLogitShift) {
  Rng rng(4);
  const auto logits = randn<double>({4, 6}, rng);
  const auto a = softmax(logits, 1), b = softmax(add(logits, Tensor<double>(logits.shape(), 7.5)), 1);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto row = [&](const Tensor<double>& t) {
      return std::max_element(t.vec().begin() + r * 6, t.vec().begin() + (r + 1) * 6) - t.vec().begin();
    };
    EXPECT_EQ(row(a), row(b));
  }
}

TEST(FFNReference, IdentityWeightsGiveGelu) {
  Rng rng(5);
  const auto x = randn<double>({4, 6}, rng);
  FFNParams<double> p{Tensor<double>({6, 6}), Tensor<double>({6, 6}), Tensor<double>({6}), Tensor<double>({6})};
  for (std::size_t i = 0; i < 6; ++i) p.w1[i * 7] = p.w2[i * 7] = 1;
  EXPECT_LE(max_abs_diff(ffn_reference(x, p), gelu(x)), 1e-15);
}

TEST(FFNReference, ZeroInputGivesOutputBias) {
  Rng rng(6);
  auto p = random_ffn<double>(5, 12, rng);
  p.b1 = Tensor<double>({12});
  p.b2 = randn<double>({5}, rng);
  const auto y = ffn_reference(Tensor<double>({3, 5}), p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(y[i * 5 + j], p.b2[j]);
}

TEST(FFNReference, MatchesOracleAndIsTokenIndependent) {
  Rng rng(7);
  auto p = random_ffn<double>(6, 18, rng);
  p.b1 = randn<double>({18}, rng);
  p.b2 = randn<double>({6}, rng);
  const auto x = randn<double>({5, 6}, rng);
  const auto y = ffn_reference(x, p);
  EXPECT_LE(max_abs_diff(y, oracle::ffn(x, p.w1, p.b1, p.w2, p.b2)), 1e-9);
  auto x2 = x;
  for (std::size_t c = 0; c < 6; ++c) x2[2 * 6 + c] += 1.0;
  const auto y2 = ffn_reference(x2, p);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 6; ++c) {
      if (r == 2)
        EXPECT_NE(y2[r * 6 + c], y[r * 6 + c]);
      else
        EXPECT_EQ(y2[r * 6 + c], y[r * 6 + c]);
    }
  EXPECT_THROW(ffn_reference(randn<double>({5, 7}, rng), p), ShapeError);
}

TEST(SpatialMLPReference, IsTransposedFFN) {
  Rng rng(8);
  const auto x = randn<double>({6, 4}, rng);
  const auto s1 = randn<double>({10, 6}, rng), s2 = randn<double>({6, 10}, rng);
  const auto y = spatial_mlp_reference(x, s1, s2);
  const FFNParams<double> as_ffn{s1, transpose2d(s2), {}, {}};
  EXPECT_LE(max_abs_diff(y, transpose2d(ffn_reference(transpose2d(x), as_ffn))), 1e-12);
  EXPECT_LE(max_abs_diff(y, oracle::transpose(oracle::ffn(transpose2d(x), s1, Tensor<double>{}, transpose2d(s2),
                                                          Tensor<double>{}))),
            1e-9);
  EXPECT_THROW(spatial_mlp_reference(randn<double>({5, 4}, rng), s1, s2), ShapeError);
}

TEST(SpatialMLPReference, SingleTokenIsPerChannelAffine) {
  Rng rng(9);
  const auto s1 = randn<double>({3, 1}, rng), s2 = randn<double>({1, 3}, rng);
  double slope = 0;
  const auto x = randn<double>({1, 5}, rng);
  const auto y = spatial_mlp_reference(x, s1, s2);
  for (std::size_t c = 0; c < 5; ++c) {
    slope = 0;
    for (std::size_t j = 0; j < 3; ++j) slope += oracle::gelu(s1[j] * x[c]) * s2[j];
    EXPECT_NEAR(y[c], slope, 1e-12);
  }
}

TEST(FFNifiedReference, DeltaKernelsGiveGelu) {
  Rng rng(10);
  const auto x = randn<double>({2, 4, 6, 6}, rng);
  const FFNifiedParams<double> p{identity_pw<double>(4), delta_dw<double>(4, 7), delta_dw<double>(4, 7)};
  EXPECT_LE(max_abs_diff(ffnified_attention_forward(x, p), gelu(x)), 1e-15);
}

TEST(FFNifiedReference, ShapePreservedAndCircularEquivariant) {
  Rng rng(11);
  for (std::size_t k : {3, 7, 9}) {
    const auto x = randn<double>({1, 3, 10, 10}, rng);
    const auto p = random_ffnified<double>(3, k, rng, PadFill::circular);
    const auto y = ffnified_attention_forward(x, p);
    EXPECT_EQ(y.shape(), x.shape());
    Tensor<double> xs(x.shape()), ys(x.shape());
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t j = 0; j < 10; ++j) {
          xs[(c * 10 + (i + 2) % 10) * 10 + (j + 7) % 10] = x[(c * 10 + i) * 10 + j];
          ys[(c * 10 + (i + 2) % 10) * 10 + (j + 7) % 10] = y[(c * 10 + i) * 10 + j];
        }
    EXPECT_LE(max_abs_diff(ffnified_attention_forward(xs, p), ys), 1e-12) << "k " << k;
    EXPECT_LE(max_abs_diff(y, ffnified_oracle(x, p)), 1e-10);
  }
}

TEST(ConvNeXtReference, DeltaIdentityPathway) {
  Rng rng(12);
  const auto x = randn<double>({2, 4, 5, 5}, rng);
  ConvNeXtParams<double> p{delta_dw<double>(4, 7), BatchNormParams<double>::identity(4), identity_pw<double>(4),
                           identity_pw<double>(4)};
  p.norm.running_mean = randn<double>({4}, rng);
  p.norm.running_var = uniform<double>({4}, rng, 0.5, 2.0);
  EXPECT_LE(max_abs_diff(convnext_block_forward(x, p), gelu(batchnorm_infer(x, p.norm))), 1e-12);
}

TEST(ConvNeXtReference, PointwisePathIsFFNOnTokens) {
  Rng rng(13);
  const auto x = randn<double>({1, 4, 3, 5}, rng);
  auto p = random_convnext<double>(4, 3, 3, rng);
  p.dw = delta_dw<double>(4, 3);
  p.norm = BatchNormParams<double>::identity(4, 0.0);
  const auto y = convnext_block_forward(x, p);
  const FFNParams<double> f{reshape(p.expand.weight, {12, 4}), transpose2d(reshape(p.reduce.weight, {4, 12})),
                            p.expand.bias, p.reduce.bias};
  EXPECT_LE(max_abs_diff(tokens_of(y), ffn_reference(tokens_of(x), f)), 1e-12);
}

TEST(ConvNeXtReference, MatchesComposedOracle) {
  Rng rng(14);
  for (int it = 0; it < 5; ++it) {
    const auto x = randn<double>({2, 4, 8, 8}, rng);
    const auto p = random_convnext<double>(4, 7, 3, rng);
    EXPECT_LE(max_abs_diff(convnext_block_forward(x, p), convnext_oracle(x, p)), 1e-6);
    const auto xf = x.cast<float>();
    const auto pf = random_convnext<float>(4, 7, 3, rng);
    EXPECT_LE(max_abs_diff(convnext_block_forward(xf, pf).cast<double>(), convnext_oracle(xf, pf)), 1e-5);
  }
}

TEST(MixerBuild, RejectsUnsupportedCombination) {
  MixerSpec<double> spec;
  spec.compatibility = Compatibility::token_dot_product;
  spec.aggregation = Aggregation::depthwise_conv;
  EXPECT_THROW(build_mixer(spec), ConfigError);
  MixerSpec<double> missing_kv;
  EXPECT_THROW(build_mixer(missing_kv), ConfigError);
}

template <typename T>
class GenericMixer : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(GenericMixer, Precisions);

TYPED_TEST(GenericMixer, AttentionInstantiation) {
  using T = TypeParam;
  Rng rng(20);
  std::uniform_int_distribution<int> heads(1, 4), per_head(1, 4), len(1, 12);
  for (int it = 0; it < 50; ++it) {
    const std::size_t h = heads(rng), d = h * per_head(rng), n = len(rng);
    const auto p = random_attention<T>(d, h, rng);
    const auto x = randn<T>({n, d}, rng);
    const auto m = build_mixer(attention_spec(p));
    EXPECT_LE(double(max_abs_diff(mixer_forward(m, x), self_attention_reference(x, p))), Sweep<T>::tol) << it;
  }
}

TYPED_TEST(GenericMixer, FFNInstantiation) {
  using T = TypeParam;
  Rng rng(21);
  std::uniform_int_distribution<int> dim(1, 12), len(1, 10);
  for (int it = 0; it < 50; ++it) {
    const std::size_t d = dim(rng), dm = 3 * dim(rng), n = len(rng);
    auto p = random_ffn<T>(d, dm, rng);
    p.b1 = randn<T>({dm}, rng, T(0.1));
    p.b2 = randn<T>({d}, rng, T(0.1));
    const auto x = randn<T>({n, d}, rng);
    const auto m = build_mixer(ffn_spec(p));
    EXPECT_LE(double(max_abs_diff(mixer_forward(m, x), ffn_reference(x, p))), Sweep<T>::tol) << it;
  }
}

TYPED_TEST(GenericMixer, SpatialMLPInstantiation) {
  using T = TypeParam;
  Rng rng(22);
  std::uniform_int_distribution<int> dim(1, 10), len(1, 16);
  for (int it = 0; it < 50; ++it) {
    const std::size_t d = dim(rng), n = len(rng), ds = dim(rng) * 2;
    const auto s1 = randn<T>({ds, n}, rng, T(0.3)), s2 = randn<T>({n, ds}, rng, T(0.3));
    const auto x = randn<T>({n, d}, rng);
    const auto m = build_mixer(spatial_mlp_spec(s1, s2));
    EXPECT_LE(double(max_abs_diff(mixer_forward(m, x), spatial_mlp_reference(x, s1, s2))), Sweep<T>::tol) << it;
  }
}

TYPED_TEST(GenericMixer, FFNifiedInstantiation) {
  using T = TypeParam;
  Rng rng(23);
  std::uniform_int_distribution<int> ch(1, 6), sp(3, 12), kr(1, 4), fill(0, 1), batch(1, 2);
  for (int it = 0; it < 50; ++it) {
    const std::size_t c = ch(rng), k = 2 * kr(rng) + 1;
    const auto p = random_ffnified<T>(c, k, rng, fill(rng) ? PadFill::circular : PadFill::zeros);
    const auto x = randn<T>({std::size_t(batch(rng)), c, std::size_t(sp(rng)), std::size_t(sp(rng))}, rng);
    const auto m = build_mixer(ffnified_spec(p));
    EXPECT_LE(double(max_abs_diff(mixer_forward(m, x), ffnified_attention_forward(x, p))), Sweep<T>::tol) << it;
  }
}

TYPED_TEST(GenericMixer, ConvNeXtInstantiation) {
  using T = TypeParam;
  Rng rng(24);
  std::uniform_int_distribution<int> ch(1, 6), sp(3, 10), kr(1, 3), ratio(1, 4), batch(1, 2);
  for (int it = 0; it < 50; ++it) {
    const std::size_t c = ch(rng), k = 2 * kr(rng) + 1;
    const auto p = random_convnext<T>(c, k, ratio(rng), rng);
    const auto x = randn<T>({std::size_t(batch(rng)), c, std::size_t(sp(rng)), std::size_t(sp(rng))}, rng);
    const auto m = build_mixer(convnext_spec(p));
    EXPECT_LE(double(max_abs_diff(mixer_forward(m, x), convnext_block_forward(x, p))), Sweep<T>::tol) << it;
  }
}
