// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "normlab/fixtures.hpp"
#include "normlab/screening.hpp"
#include "test_util.hpp"

using namespace normlab;
using namespace normlab::screening;
namespace fx = normlab::fixtures;

namespace {

RunRecord record(std::vector<double> train_losses, double final_val, std::uint64_t seed = 1,
                 RunStatus status = RunStatus::completed) {
  RunRecord r;
  r.seed = seed;
  r.run_id = "run" + std::to_string(seed);
  for (std::size_t i = 0; i < train_losses.size(); ++i) r.trace.push_back({i * 100, train_losses[i], final_val});
  r.status = status;
  r.summarize();
  return r;
}

CalibrationRun healthy(double sigma, std::uint64_t seed = 1, double final_val = 3.0) {
  CalibrationRun c{record({5.5, 4.0, 3.0}, final_val, seed), probes::SaturationReport{}};
  c.saturation->sigma = sigma;
  c.record.saturation = sigma;
  return c;
}

ModelConfig gpt2_dyt() {
  auto c = test::micro_config(1, 16, 2, 256, 16);
  c.norm_kind = NormKind::dyt;
  return c;
}

ModelConfig llama_dyt() {
  auto c = gpt2_dyt();
  c.ffn_kind = FfnKind::swiglu;
  c.pos_kind = PosKind::rope;
  c.n_kv_head = 1;
  return c;
}

}  // namespace

TEST(Prior, PublishedRatios) {
  auto a = tp_prior(64e6, 1e6);
  EXPECT_EQ(a.verdict, Verdict::try_dyt);
  EXPECT_NEAR(a.ratio, 0.016, 5e-4);
  auto b = tp_prior(64e6, 118e6);
  EXPECT_EQ(b.verdict, Verdict::prefer_norm);
  EXPECT_NEAR(b.ratio, 1.84, 5e-3);
  auto c = tp_prior(64e6, 10e6);
  EXPECT_EQ(c.verdict, Verdict::needs_calibration);
  EXPECT_NEAR(c.ratio, 0.156, 5e-4);
}

TEST(Prior, ScaleInvariantBelowGuard) {
  for (double tokens : {1e5, 1e6, 5e6, 1e7, 3e7, 1e8})
    for (double k : {1e-3, 0.1, 0.5, 2.0, 5.0}) {
      const double p = 64e6;
      EXPECT_EQ(tp_prior(p, tokens).verdict, tp_prior(p * k, tokens * k).verdict) << tokens << " x" << k;
    }
}

TEST(Prior, RefusesLargeModelsAndOtherStacks) {
  auto big = tp_prior(354e6, 1e6);
  EXPECT_EQ(big.verdict, Verdict::needs_calibration);
  EXPECT_NE(big.reason.find("354M"), std::string::npos);
  EXPECT_EQ(tp_prior(353.9e6, 1e6).verdict, Verdict::try_dyt);
  const auto llama = llama_dyt();
  auto r = tp_prior(64e6, 1e6, &llama);
  EXPECT_EQ(r.verdict, Verdict::needs_calibration);
  EXPECT_NE(r.reason.find("GPT-2"), std::string::npos);
  auto diff = gpt2_dyt();
  diff.attn_kind = AttnKind::diff_v1;
  EXPECT_EQ(tp_prior(64e6, 1e6, &diff).verdict, Verdict::needs_calibration);
  EXPECT_THROW(tp_prior(0, 1e6), ConfigError);
  EXPECT_THROW(tp_prior(1e6, -1), ConfigError);
}

TEST(Prior, DecidePriorCarriesEvidence) {
  auto d = decide_prior(64e6, 1e6);
  EXPECT_EQ(d.verdict, Verdict::try_dyt);
  auto j = d.to_json();
  EXPECT_EQ(j["evidence"]["mode"], "prior_only");
  EXPECT_EQ(j["prior"]["verdict"], "try_dyt");
  EXPECT_TRUE(j["mean_sigma"].is_null());
}

TEST(Decide, ThresholdRule) {
  const auto c = gpt2_dyt();
  EXPECT_EQ(decide({healthy(0.49)}, c).verdict, Verdict::try_dyt);
  EXPECT_EQ(decide({healthy(0.30)}, c).verdict, Verdict::prefer_norm);
  EXPECT_EQ(decide({healthy(0.43)}, c).verdict, Verdict::prefer_norm);
  auto two = decide({healthy(0.40, 1), healthy(0.50, 2)}, c);
  EXPECT_NEAR(*two.mean_sigma, 0.45, 1e-15);
  EXPECT_EQ(two.verdict, Verdict::try_dyt);
}

TEST(Decide, CollapseDominates) {
  auto runs = std::vector<CalibrationRun>{healthy(0.60, 1), healthy(0.60, 2)};
  runs[1].record = record({10.9, 10.8, 10.7}, 3.0, 2);
  auto d = decide(runs, gpt2_dyt());
  EXPECT_EQ(d.verdict, Verdict::unstable_abort);
  EXPECT_TRUE(d.flags[1].plateau);
  EXPECT_FALSE(d.flags[0].plateau);
  EXPECT_EQ(d.to_json()["evidence"]["rule"], "collapse flag set");
}

TEST(Decide, OtherProbeThresholdDefers) {
  Thresholds th;
  th.probe_threshold = 1.5;
  EXPECT_EQ(decide({healthy(0.9)}, gpt2_dyt(), th).verdict, Verdict::needs_calibration);
}

TEST(Decide, DivergedWithoutSigma) {
  CalibrationRun bad{record({5.5, 7.0}, 3.0, 1, RunStatus::diverged), std::nullopt};
  auto d = decide({bad}, gpt2_dyt());
  EXPECT_EQ(d.verdict, Verdict::unstable_abort);
  EXPECT_TRUE(d.flags[0].diverged);
  EXPECT_FALSE(d.mean_sigma);
}

TEST(Decide, DeterministicOnIdenticalInputs) {
  std::vector<CalibrationRun> runs = {healthy(0.44, 1), healthy(0.41, 2, 3.2)};
  EXPECT_EQ(decide(runs, gpt2_dyt()).to_json().dump(), decide(runs, gpt2_dyt()).to_json().dump());
}

TEST(Collapse, AblationTriples) {
  const std::vector<RunRecord> recs = {record({5.5, 4.5}, 4.47, 1), record({5.5, 4.5}, 4.48, 2),
                                       record({5.5, 4.5}, 4.48, 3)};
  auto swiglu_off = llama_dyt();
  swiglu_off.ffn_kind = FfnKind::gelu;
  auto f = detect_collapse(recs, {0.257, 0.257, 0.258}, swiglu_off);
  for (const auto& x : f) EXPECT_FALSE(x.any());

  auto rope_gqa = llama_dyt();
  rope_gqa.ffn_kind = FfnKind::gelu;
  auto g = detect_collapse(recs, {0.55, 0.559, 0.57}, rope_gqa);
  for (const auto& x : g) EXPECT_TRUE(x.high_saturation);
  EXPECT_DOUBLE_EQ(g[1].triggers["sigma"].get<double>(), 0.559);
}

TEST(Collapse, HighSaturationOnlyWithLlamaToggles) {
  const std::vector<RunRecord> recs = {record({5.5, 4.0}, 4.0)};
  EXPECT_FALSE(detect_collapse(recs, {0.9}, gpt2_dyt())[0].high_saturation);
  EXPECT_TRUE(detect_collapse(recs, {0.5}, llama_dyt())[0].high_saturation);
  EXPECT_FALSE(detect_collapse(recs, {0.4999}, llama_dyt())[0].high_saturation);
}

TEST(Collapse, PlateauAndDispersion) {
  auto flat = detect_collapse({record({10.9, 10.8, 10.7}, 10.7)}, {std::nullopt}, gpt2_dyt());
  EXPECT_TRUE(flat[0].plateau);
  EXPECT_NEAR(flat[0].triggers["train_loss_drop"].get<double>(), 0.2, 1e-12);
  // Exactly at the margin counts as progress.
  EXPECT_FALSE(detect_collapse({record({5.0, 4.5}, 4.5)}, {std::nullopt}, gpt2_dyt())[0].plateau);
  auto spread = detect_collapse({record({6, 4}, 4.0, 1), record({6, 4}, 5.2, 2)}, {std::nullopt, std::nullopt}, gpt2_dyt());
  EXPECT_TRUE(spread[0].seed_dispersion);
  EXPECT_TRUE(spread[1].seed_dispersion);
  auto tight = detect_collapse({record({6, 4}, 4.0, 1), record({6, 4}, 4.3, 2)}, {std::nullopt, std::nullopt}, gpt2_dyt());
  EXPECT_FALSE(tight[0].seed_dispersion);
  EXPECT_THROW(detect_collapse({}, {}, gpt2_dyt()), ConfigError);
}

TEST(Fixtures, TwelveCellClassification) {
  int correct = 0;
  std::vector<std::string> wrong;
  for (const auto& c : fx::saturation_cells_12()) {
    const bool said_helps = decide({healthy(c.sat)}, gpt2_dyt()).verdict == Verdict::try_dyt;
    ASSERT_EQ(said_helps, probes::classify_saturation(c.sat) == probes::SatVerdict::helps);
    if (said_helps == c.helps()) ++correct;
    else wrong.push_back(c.label());
  }
  EXPECT_EQ(correct, 9);
  EXPECT_EQ(wrong, (std::vector<std::string>{"S2/10M", "S3/1M", "S3/10M"}));
}

TEST(Fixtures, LlamaDirections) {
  const std::vector<probes::SatVerdict> expect = {probes::SatVerdict::helps, probes::SatVerdict::helps,
                                                  probes::SatVerdict::hurts};
  const auto& cells = fx::llama_cells();
  ASSERT_EQ(cells.size(), 3u);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    EXPECT_EQ(probes::classify_saturation(cells[i].sat), expect[i]) << cells[i].label();
    EXPECT_EQ(cells[i].delta < 0, expect[i] == probes::SatVerdict::helps) << cells[i].label();
  }
}

TEST(Calibrate, Preconditions) {
  auto s = SyntheticCorpus(2).stream(20000);
  DataBudget b{16000, 4000, 0};
  auto [tr, va] = subset(s, b);
  TrainConfig tc;
  EXPECT_EQ(CalibrationOptions{}.steps, 500u);
  EXPECT_EQ(required_seeds(llama_dyt()), 3u);
  EXPECT_EQ(required_seeds(gpt2_dyt()), 1u);
  try {
    calibrate(llama_dyt(), tc, tr, va, b, {1});
    FAIL() << "one seed accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("three"), std::string::npos);
  }
  auto ln = gpt2_dyt();
  ln.norm_kind = NormKind::layernorm;
  EXPECT_THROW(calibrate(ln, tc, tr, va, b, {1}), ConfigError);
  EXPECT_THROW(calibrate(llama_dyt(), tc, tr, va, b, {1, 2, 2}), ConfigError);
}

TEST(Calibrate, IdenticalSeedsGiveIdenticalSigma) {
  auto s = SyntheticCorpus(2).stream(30000);
  DataBudget b{24000, 6000, 0};
  auto [tr, va] = subset(s, b);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.eval_batches = 2;
  tc.lr_peak = 3e-3;
  CalibrationOptions opt;
  opt.steps = 40;
  opt.sample = {4, 2, 16, 0};
  auto a = calibrate(gpt2_dyt(), tc, tr, va, b, {7}, opt);
  auto c = calibrate(gpt2_dyt(), tc, tr, va, b, {7}, opt);
  ASSERT_TRUE(a[0].saturation && c[0].saturation);
  EXPECT_EQ(a[0].saturation->sigma, c[0].saturation->sigma);
  EXPECT_EQ(a[0].record.trace.size(), c[0].record.trace.size());
  EXPECT_EQ(a[0].record.train.max_steps, 40u);
  auto d = decide(a, gpt2_dyt());
  EXPECT_EQ(d.to_json()["evidence"]["runs"].size(), 1u);
}
