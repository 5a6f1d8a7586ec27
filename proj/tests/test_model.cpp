// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "normlab/gradcheck.hpp"
#include "normlab/model.hpp"
#include "test_util.hpp"

using namespace normlab;
using normlab::test::micro_config;
using normlab::test::randn;

namespace {

using T64 = Tensor<double>;

NormParams<double> affine_params(std::size_t D, double alpha, double gamma, double beta) {
  return {T64::from({1}, {alpha}), T64({D}, gamma), T64({D}, beta)};
}

std::vector<TokenId> tokens_for(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<TokenId> t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng.below(c.vocab_size));
  return t;
}

// Max relative error between tape gradients and central differences over
// every coordinate of every parameter.
double param_gradcheck(Model<double>& m, std::span<const TokenId> x, std::span<const TokenId> y, std::size_t B,
                       std::size_t T) {
  auto loss = [&](Tape<double>& tape) { return ops::cross_entropy(tape, m.forward(tape, x, B, T), y); };
  for (auto& p : m.params()) p.value.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  double worst = 0;
  const double h = 1e-5;
  for (auto& p : m.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double& w = p.value.data()[i];
      const double w0 = w;
      Tape<double> t1(false), t2(false);
      w = w0 + h;
      const double fp = loss(t1).item();
      w = w0 - h;
      const double fm = loss(t2).item();
      w = w0;
      const double cd = (fp - fm) / (2 * h);
      const double a = p.value.grad()[i];
      const double err = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
      // Below ~1e-6 the difference quotient is mostly rounding noise.
      if (std::abs(a) + std::abs(cd) > 1e-6) worst = std::max(worst, err);
    }
  }
  return worst;
}

// Causal softmax(q k^T / sqrt(d)) v for one head, plain loops.
std::vector<double> naive_head(const std::vector<double>& q, const std::vector<double>& k,
                               const std::vector<double>& v, std::size_t T, std::size_t d, std::size_t dv) {
  std::vector<double> out(T * dv, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    std::vector<double> s(i + 1);
    double mx = -1e300;
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j <= i; ++j)
      for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += s[j] / z * v[j * dv + c];
  }
  return out;
}

}  // namespace

TEST(NormApply, DytAtZeroIsZero) {
  Tape<double> tape(false);
  for (double a : {0.1, 2.0, 7.0}) {
    auto y = norm_apply(tape, NormKind::dyt, T64({1, 4}, 0.0), affine_params(4, a, 1, 0));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(NormApply, DytScalarEvaluation) {
  Tape<double> tape(false);
  auto y = norm_apply(tape, NormKind::dyt, T64({1, 1}, 0.5), affine_params(1, 2, 2, 1));
  EXPECT_NEAR(y.item(), 2 * 0.76159415595576485 + 1, 1e-12);
  EXPECT_NEAR(y.item(), 2.5232, 5e-5);
}

TEST(NormApply, HardtanhClamps) {
  Tape<double> tape(false);
  auto y = norm_apply(tape, NormKind::hardtanh, T64::from({1, 2}, {1.5, 0.3}), affine_params(2, 0, 1, 0));
  EXPECT_EQ(y.data()[0], 1.0);
  EXPECT_EQ(y.data()[1], 0.3);
}

TEST(NormApply, LayerNormConstantRowGivesBeta) {
  Tape<double> tape(false);
  NormParams<double> p{T64(), randn({5}, 1), randn({5}, 2)};
  auto y = norm_apply(tape, NormKind::layernorm, T64({1, 5}, 3.25), p);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(y.data()[j], p.beta.data()[j], 1e-12);
}

TEST(NormApply, RmsNormDividesByRms) {
  Tape<double> tape(false);
  NormParams<double> p{T64(), T64({2}, 1.0), T64()};
  auto y = norm_apply(tape, NormKind::rmsnorm, T64::from({1, 2}, {3, 4}), p);
  const double rms = std::sqrt((9 + 16) / 2.0 + 1e-5);
  EXPECT_NEAR(y.data()[0], 3 / rms, 1e-12);
  EXPECT_NEAR(y.data()[1], 4 / rms, 1e-12);
}

TEST(NormApply, MissingParamsRejected) {
  Tape<double> tape(false);
  NormParams<double> no_alpha{T64(), T64({3}, 1.0), T64({3}, 0.0)};
  EXPECT_THROW(norm_apply(tape, NormKind::dyt, T64({1, 3}), no_alpha), ConfigError);
  NormParams<double> no_beta{T64(), T64({3}, 1.0), T64()};
  EXPECT_THROW(norm_apply(tape, NormKind::layernorm, T64({1, 3}), no_beta), ConfigError);
}

TEST(NormProperty, DytOutputBoundedByGamma) {
  Tape<double> tape(false);
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    CounterRng rng(seed);
    NormParams<double> p{T64::from({1}, {0.1 + 5 * rng.uniform()}), randn({8}, seed + 100), randn({8}, seed + 200)};
    auto x = randn({16, 8}, seed, std::pow(10.0, static_cast<double>(seed % 5)));
    auto y = norm_apply(tape, NormKind::dyt, x, p);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const std::size_t j = i % 8;
      EXPECT_LE(std::abs(y.data()[i] - p.beta.data()[j]), std::abs(p.gamma.data()[j]) + 1e-12);
    }
  }
}

TEST(NormProperty, HardtanhClampIdempotent) {
  Tape<double> tape(false);
  auto p = affine_params(8, 0, 1, 0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto x = randn({4, 8}, seed, 3.0);
    auto once = norm_apply(tape, NormKind::hardtanh, x, p);
    auto twice = norm_apply(tape, NormKind::hardtanh, once, p);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(once.data()[i], twice.data()[i]);
  }
}

TEST(Attention, DiffWithZeroLambdaEqualsBranchOneStandard) {
  auto c = micro_config(1, 8, 2, 11, 5);
  c.attn_kind = AttnKind::diff_v1;
  Model<double> m(c, 3);
  m.diff_override.lambda = 0.0;
  m.diff_override.identity_stabilizer = true;
  const std::size_t T = 5, D = 8, hd = 4;
  auto h = randn({1, T, D}, 9);
  Tape<double> tape(false);
  auto y = m.attention(tape, h, m.blocks()[0].attn);

  const auto& a = m.blocks()[0].attn;
  auto qkv = ops::linear(tape, h, a.c_attn_w, a.c_attn_b);  // [1, T, 3D]
  std::vector<double> q1(T * hd), k1(T * hd), v(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = qkv.data() + t * 3 * D;
    for (std::size_t c2 = 0; c2 < hd; ++c2) {
      q1[t * hd + c2] = row[c2];
      k1[t * hd + c2] = row[D + c2];
    }
    for (std::size_t c2 = 0; c2 < D; ++c2) v[t * D + c2] = row[2 * D + c2];
  }
  auto heads = naive_head(q1, k1, v, T, hd, D);
  auto expect = ops::linear(tape, T64::from({1, T, D}, heads), a.c_proj_w, a.c_proj_b);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], expect.data()[i], 1e-5);
}

TEST(Attention, SingleTokenReturnsValueProjection) {
  auto c = micro_config(1, 8, 2, 11, 5);
  Model<double> m(c, 4);
  auto h = randn({2, 1, 8}, 5);
  Tape<double> tape(false);
  const auto& a = m.blocks()[0].attn;
  auto y = m.attention(tape, h, a);
  auto qkv = ops::linear(tape, h, a.c_attn_w, a.c_attn_b);
  std::vector<double> v(2 * 8);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 8; ++j) v[b * 8 + j] = qkv.data()[b * 24 + 16 + j];
  auto expect = ops::linear(tape, T64::from({2, 1, 8}, v), a.c_proj_w, a.c_proj_b);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], expect.data()[i], 1e-12);
}

TEST(Attention, ExpLambdaAtOriginIsZero) {
  auto c = micro_config(2, 8, 2);
  c.attn_kind = AttnKind::diff_v1;
  Model<double> m(c, 1);
  for (auto& p : m.params())
    if (p.name.find("lambda_") != std::string::npos) std::fill(p.value.values().begin(), p.value.values().end(), 0.0);
  for (double l : m.lambdas()) EXPECT_EQ(l, 0.0);
}

TEST(Attention, SigmoidLambdaBounded) {
  auto c = micro_config(1, 8, 2);
  c.attn_kind = AttnKind::diff_sigmoid;
  Model<double> m(c, 1);
  EXPECT_EQ(m.lambdas().at(0), 0.5);
  for (double raw : {-40.0, -3.0, 3.0, 20.0, 40.0}) {
    SCOPED_TRACE(raw);
    m.param("h.0.attn.lambda_raw").value.data()[0] = raw;
    const double l = m.lambdas()[0];
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0);
    if (std::abs(raw) <= 20) {  // beyond this the double result rounds to an endpoint
      EXPECT_GT(l, 0.0);
      EXPECT_LT(l, 1.0);
    }
  }
}

TEST(Attention, CausalSoftmaxRowsSumToOneOverUnmasked) {
  Tape<double> tape(false);
  auto s = ops::causal_softmax(tape, randn({2, 3, 6, 6}, 4, 5.0));
  for (std::size_t r = 0; r < s.size() / 6; ++r) {
    const std::size_t i = r % 6;
    double total = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      if (j > i) {
        EXPECT_EQ(s.data()[r * 6 + j], 0.0);
      }
      total += s.data()[r * 6 + j];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Ffn, SwigluAtZeroIsZero) {
  auto c = micro_config();
  c.ffn_kind = FfnKind::swiglu;
  Model<double> m(c, 2);
  Tape<double> tape(false);
  auto y = m.ffn(tape, T64({1, 3, 8}, 0.0), m.blocks()[0].mlp);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Ffn, SiluAtOne) { EXPECT_NEAR(ops::silu_value(1.0), 0.7310585786300049, 1e-15); }

TEST(Ffn, GeluGradcheck) {
  Model<double> m(micro_config(), 2);
  const auto& p = m.blocks()[0].mlp;
  const auto w = randn({1, 3, 8}, 50);
  const double err = grad_check(
      [&](Tape<double>& t, const T64& h) { return ops::dot(t, m.ffn(t, h, p), w); }, randn({1, 3, 8}, 7));
  EXPECT_LT(err, 1e-5);
}

TEST(Ffn, HiddenSizes) {
  ModelConfig c;
  c.d_model = 128;
  EXPECT_EQ(c.ffn_hidden(), 512u);
  c.ffn_kind = FfnKind::swiglu;
  EXPECT_EQ(c.ffn_hidden(), 344u);  // ceil(1024/3) = 342, rounded up to 8
}

TEST(Rope, PositionZeroIsIdentity) {
  Tape<double> tape(false);
  auto x = randn({1, 2, 1, 6}, 3);
  auto y = ops::rope(tape, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Rope, PreservesPairNorms) {
  Tape<double> tape(false);
  auto x = randn({2, 3, 9, 8}, 4);
  auto y = ops::rope(tape, x);
  for (std::size_t i = 0; i < x.size(); i += 2) {
    const double a = std::hypot(x.data()[i], x.data()[i + 1]);
    const double b = std::hypot(y.data()[i], y.data()[i + 1]);
    EXPECT_NEAR(a, b, 1e-6);
  }
}

TEST(Rope, AngleFormula) {
  Tape<double> tape(false);
  auto x = T64({1, 1, 4, 4}, 0.0);
  for (std::size_t t = 0; t < 4; ++t) {
    x.data()[t * 4 + 2] = 1.0;  // pair i = 1
  }
  auto y = ops::rope(tape, x, 100.0);
  for (std::size_t t = 0; t < 4; ++t) {
    const double theta = static_cast<double>(t) * std::pow(100.0, -2.0 / 4.0);
    EXPECT_NEAR(y.data()[t * 4 + 2], std::cos(theta), 1e-12);
    EXPECT_NEAR(std::abs(y.data()[t * 4 + 3]), std::abs(std::sin(theta)), 1e-12);
  }
}

TEST(Rope, CommutesWithHeadSplit) {
  Tape<double> tape(false);
  const std::size_t H = 3, hd = 4;
  auto x = randn({2, 5, H * hd}, 8);
  auto all = ops::rope(tape, ops::split_heads(tape, x, 0, H, hd));
  for (std::size_t h = 0; h < H; ++h) {
    auto one = ops::rope(tape, ops::split_heads(tape, x, h * hd, 1, hd));
    auto pick = ops::take_heads(tape, all, H, h);
    ASSERT_EQ(one.shape(), pick.shape());
    for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(one.data()[i], pick.data()[i], 1e-6);
  }
}

TEST(Position, ZeroLearnedTableEqualsNoPosition) {
  auto c = micro_config(1, 8, 2, 11, 6);
  Model<double> m(c, 5);
  auto& wpe = m.param("wpe").value;
  std::fill(wpe.values().begin(), wpe.values().end(), 0.0);
  const auto tok = tokens_for(c, 12, 1);
  Tape<double> tape(false);
  auto with = m.forward(tape, tok, 2, 6);
  auto bare = m.forward_embedded(tape, ops::gather_rows(tape, m.param("wte").value, tok, Shape{2, 6}));
  for (std::size_t i = 0; i < with.size(); ++i) EXPECT_EQ(with.data()[i], bare.data()[i]);
}

TEST(Config, ValidationRejectsBadShapes) {
  auto c = micro_config(1, 8, 3);
  EXPECT_THROW(c.validate(), ConfigError);  // 8 % 3
  c = micro_config(1, 12, 3);
  c.attn_kind = AttnKind::diff_v1;
  EXPECT_THROW(c.validate(), ConfigError);  // odd heads
  c = micro_config(1, 6, 2);
  c.pos_kind = PosKind::rope;
  EXPECT_THROW(c.validate(), ConfigError);  // head_dim 3
  c = micro_config(1, 8, 4);
  c.n_kv_head = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = micro_config();
  c.norm_kind = NormKind::dyt;
  c.alpha_init = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = micro_config();
  c.dropout_p = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  auto c = micro_config(3, 16, 4);
  c.norm_kind = NormKind::hardtanh;
  c.ffn_kind = FfnKind::swiglu;
  c.pos_kind = PosKind::rope;
  c.n_kv_head = 2;
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
  EXPECT_THROW(ModelConfig::from_json({{"norm_kind", "batchnorm"}}), ConfigError);
}

TEST(Forward, OversizeSequenceRejected) {
  auto c = micro_config(1, 8, 2, 11, 4);
  Model<double> m(c, 1);
  Tape<double> tape(false);
  EXPECT_THROW(m.forward(tape, tokens_for(c, 5, 1), 1, 5), ShapeError);
  std::vector<TokenId> bad = {0, 1, 11, 2};
  EXPECT_THROW(m.forward(tape, bad, 1, 4), ShapeError);
}

TEST(Forward, TapCountIsTwoPerLayerPlusOne) {
  for (std::size_t L : {1u, 2u, 5u}) {
    auto c = micro_config(L);
    Model<float> m(c, 1);
    ProbeTaps<float> taps;
    ForwardOptions<float> fo;
    fo.taps = &taps;
    Tape<float> tape(false);
    m.forward(tape, tokens_for(c, 6, 2), 1, 6, fo);
    EXPECT_EQ(taps.norm_inputs.size(), 2 * L + 1);
    EXPECT_EQ(c.n_norm_sites(), 2 * L + 1);
    EXPECT_EQ(Model<float>::site_name(2 * L, L), "ln_f");
    EXPECT_EQ(Model<float>::site_name(1, L), "h.0.ln_2");
  }
}

TEST(Forward, UntrainedLossNearLogVocab) {
  ModelConfig c;
  c.n_layer = 2;
  c.d_model = 64;
  c.vocab_size = 256;
  c.block_size = 32;
  for (NormKind k : {NormKind::layernorm, NormKind::dyt, NormKind::rmsnorm, NormKind::hardtanh}) {
    c.norm_kind = k;
    Model<float> m(c, 7);
    const auto x = tokens_for(c, 4 * 32, 3), y = tokens_for(c, 4 * 32, 4);
    Tape<float> tape(false);
    const double loss = ops::cross_entropy(tape, m.forward(tape, x, 4, 32), y).item();
    EXPECT_NEAR(loss, std::log(256.0), 0.05 * std::log(256.0)) << name_of(k);
  }
}

TEST(Forward, TapsDoNotChangeLogits) {
  auto c = micro_config(2, 16, 4, 30, 8);
  c.norm_kind = NormKind::dyt;
  Model<float> m(c, 9);
  const auto tok = tokens_for(c, 16, 5);
  Tape<float> t1(false), t2(false);
  auto plain = m.forward(t1, tok, 2, 8);
  ProbeTaps<float> taps;
  ForwardOptions<float> fo;
  fo.taps = &taps;
  auto tapped = m.forward(t2, tok, 2, 8, fo);
  ASSERT_EQ(plain.size(), tapped.size());
  EXPECT_TRUE(std::equal(plain.values().begin(), plain.values().end(), tapped.values().begin()));
}

TEST(ParamCount, MatchesGpt2ClosedForm) {
  for (auto [L, H, D] : {std::tuple{1u, 2u, 8u}, std::tuple{4u, 4u, 128u}, std::tuple{6u, 6u, 384u}}) {
    ModelConfig c;
    c.n_layer = L;
    c.n_head = H;
    c.d_model = D;
    c.vocab_size = 256;
    c.block_size = 64;
    Model<float> m(c, 0);
    EXPECT_EQ(m.num_params(), gpt2_param_count(L, D, 256, 64));
    c.weight_tying = false;
    EXPECT_EQ(Model<float>(c, 0).num_params(), gpt2_param_count(L, D, 256, 64) + 256 * D);
  }
  // GPT-2 small (12/12/768, V 50257, T 1024) is the familiar 124M.
  EXPECT_EQ(gpt2_param_count(12, 768, 50257, 1024), 124439808u);
}

TEST(ParamCount, DiffKindsShareAllShapesExceptLambda) {
  auto c = micro_config(2, 16, 4);
  c.attn_kind = AttnKind::diff_v1;
  Model<float> v1(c, 0);
  c.attn_kind = AttnKind::diff_sigmoid;
  Model<float> sg(c, 0);
  auto shapes = [](const Model<float>& m) {
    std::map<std::string, Shape> out;
    for (const auto& p : m.params())
      if (p.name.find("lambda") == std::string::npos) out[p.name] = p.value.shape();
    return out;
  };
  EXPECT_EQ(shapes(v1), shapes(sg));
  EXPECT_NO_THROW(v1.param("h.0.attn.lambda_q1"));
  EXPECT_NO_THROW(sg.param("h.1.attn.lambda_raw"));
}

TEST(ParamCount, DytAddsOneAlphaPerSite) {
  auto c = micro_config(3, 16, 4);
  Model<float> ln(c, 0);
  c.norm_kind = NormKind::dyt;
  Model<float> dy(c, 0);
  EXPECT_EQ(dy.num_params(), ln.num_params() + c.n_norm_sites());
  EXPECT_EQ(dy.alphas(), std::vector<double>(7, 2.0));
}

struct Variant {
  const char* name;
  NormKind norm;
  AttnKind attn;
  FfnKind ffn;
  PosKind pos;
  std::size_t kv;
};

class FullModelGradient : public ::testing::TestWithParam<Variant> {};

TEST_P(FullModelGradient, OneLayerLossMatchesFiniteDifference) {
  const auto& v = GetParam();
  auto c = micro_config(1, 8, 4, 7, 4);
  c.norm_kind = v.norm;
  c.attn_kind = v.attn;
  c.ffn_kind = v.ffn;
  c.pos_kind = v.pos;
  c.n_kv_head = v.kv;
  c.alpha_init = 0.9;
  Model<double> m(c, 21);
  // Move the zero-initialized parameters away from their init so every path carries gradient.
  for (auto& p : m.params()) {
    CounterRng rng(fnv1a(p.name));
    for (double& w : p.value.values()) w += 0.3 * rng.normal();
  }
  const auto x = tokens_for(c, 8, 1), y = tokens_for(c, 8, 2);
  EXPECT_LT(param_gradcheck(m, x, y, 2, 4), 1e-4) << v.name;

  const auto w = randn({2, 4, 8}, 3, 0.5);
  const double err = grad_check(
      [&](Tape<double>& t, const T64& e) { return ops::cross_entropy(t, m.forward_embedded(t, e), y); }, w);
  EXPECT_LT(err, 1e-4) << v.name;
}

INSTANTIATE_TEST_SUITE_P(
    Toggles, FullModelGradient,
    ::testing::Values(Variant{"gpt2", NormKind::layernorm, AttnKind::standard, FfnKind::gelu, PosKind::learned, 0},
                      Variant{"dyt", NormKind::dyt, AttnKind::standard, FfnKind::gelu, PosKind::learned, 0},
                      Variant{"rmsnorm", NormKind::rmsnorm, AttnKind::standard, FfnKind::gelu, PosKind::learned, 0},
                      Variant{"hardtanh", NormKind::hardtanh, AttnKind::standard, FfnKind::gelu, PosKind::learned, 0},
                      Variant{"diff_v1", NormKind::layernorm, AttnKind::diff_v1, FfnKind::gelu, PosKind::learned, 0},
                      Variant{"diff_sigmoid", NormKind::dyt, AttnKind::diff_sigmoid, FfnKind::gelu, PosKind::learned, 0},
                      Variant{"llama", NormKind::dyt, AttnKind::standard, FfnKind::swiglu, PosKind::rope, 2}),
    [](const ::testing::TestParamInfo<Variant>& info) { return std::string(info.param.name); });

TEST(Model, CloneIsDeep) {
  Model<float> a(micro_config(), 1);
  auto b = a.clone();
  b.params()[0].value.data()[0] += 1.0f;
  EXPECT_NE(a.params()[0].value.data()[0], b.params()[0].value.data()[0]);
  EXPECT_EQ(a.params()[1].value.data()[0], b.params()[1].value.data()[0]);
}
