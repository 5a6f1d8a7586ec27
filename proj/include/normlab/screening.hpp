// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "normlab/probes.hpp"
#include "normlab/stats.hpp"
#include "normlab/trainer.hpp"

namespace normlab::screening {

enum class Verdict { try_dyt, prefer_norm, needs_calibration, unstable_abort };

inline const char* name_of(Verdict v) {
  switch (v) {
    case Verdict::try_dyt: return "try_dyt";
    case Verdict::prefer_norm: return "prefer_norm";
    case Verdict::needs_calibration: return "needs_calibration";
    case Verdict::unstable_abort: return "unstable_abort";
  }
  return "?";
}

struct Thresholds {
  double sigma_threshold = 0.43;    // mean sigma above this: try dyt
  double probe_threshold = 2.0;     // |alpha x| cutoff used to measure sigma
  double plateau_margin = 0.5;      // nats of train-loss drop below which a run plateaued
  double dispersion_margin = 0.5;   // nats of std across seeds' final val loss
  double high_saturation = 0.5;     // any seed at or above this, with Llama-style toggles
  double tp_low = 0.05;
  double tp_high = 0.5;
  double prior_max_params = 354e6;  // prior is not applied at or above this size

  nlohmann::json to_json() const {
    return {{"sigma_threshold", sigma_threshold},     {"probe_threshold", probe_threshold},
            {"plateau_margin", plateau_margin},       {"dispersion_margin", dispersion_margin},
            {"high_saturation", high_saturation},     {"tp_low", tp_low},
            {"tp_high", tp_high},                     {"prior_max_params", prior_max_params}};
  }
};

struct CollapseFlags {
  bool plateau = false;
  bool diverged = false;
  bool seed_dispersion = false;
  bool high_saturation = false;
  nlohmann::json triggers = nlohmann::json::object();  // the numbers behind each flag

  bool any() const { return plateau || diverged || seed_dispersion || high_saturation; }

  nlohmann::json to_json() const {
    return {{"plateau", plateau},
            {"diverged", diverged},
            {"seed_dispersion", seed_dispersion},
            {"high_saturation", high_saturation},
            {"triggers", triggers}};
  }
};

// Minimum calibration seeds: three with any Llama-style toggle, two for other
// non-GPT-2 stacks, one otherwise.
inline std::size_t required_seeds(const ModelConfig& c) {
  if (c.llama_toggles()) return 3;
  if (!c.gpt2_stack()) return 2;
  return 1;
}

// sigmas[i] is the measured global sigma of records[i], if any.
inline std::vector<CollapseFlags> detect_collapse(const std::vector<RunRecord>& records,
                                                  const std::vector<std::optional<double>>& sigmas,
                                                  const ModelConfig& config, const Thresholds& th = {}) {
  if (records.empty()) throw ConfigError("detect_collapse: needs at least one calibration record");
  if (sigmas.size() != records.size()) throw ConfigError("detect_collapse: one sigma slot per record");
  std::vector<CollapseFlags> out(records.size());

  std::vector<double> finals;
  for (const auto& r : records)
    if (!r.trace.empty() && std::isfinite(r.trace.back().val_loss)) finals.push_back(r.trace.back().val_loss);
  std::optional<double> dispersion;
  if (finals.size() >= 2) dispersion = stats::mean_std(finals, 1).std;

  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto& f = out[i];
    const double drop = r.initial_train_loss() - r.final_train_loss;
    f.triggers["train_loss_drop"] = std::isfinite(drop) ? nlohmann::json(drop) : nlohmann::json(nullptr);
    f.triggers["plateau_margin"] = th.plateau_margin;
    f.plateau = !(drop >= th.plateau_margin);
    f.diverged = r.status == RunStatus::diverged;
    f.triggers["status"] = normlab::name_of(r.status);
    if (dispersion) {
      f.triggers["final_val_std"] = *dispersion;
      f.triggers["dispersion_margin"] = th.dispersion_margin;
      f.seed_dispersion = *dispersion > th.dispersion_margin;
    }
    if (config.llama_toggles() && sigmas[i]) {
      f.triggers["sigma"] = *sigmas[i];
      f.triggers["high_saturation"] = th.high_saturation;
      f.high_saturation = *sigmas[i] >= th.high_saturation;
    }
  }
  // One seed at or above the cutoff marks the whole calibration.
  if (std::any_of(out.begin(), out.end(), [](const CollapseFlags& f) { return f.high_saturation; }))
    for (auto& f : out) f.high_saturation = true;
  return out;
}

struct PriorDecision {
  Verdict verdict = Verdict::needs_calibration;
  double ratio = 0;
  std::string reason;

  nlohmann::json to_json() const { return {{"verdict", name_of(verdict)}, {"tp_ratio", ratio}, {"reason", reason}}; }
};

// Token-to-parameter prior. Only applied to GPT-2-style stacks below the
// size guard; otherwise it defers to calibration.
inline PriorDecision tp_prior(double params, double tokens, const ModelConfig* config = nullptr,
                              const Thresholds& th = {}) {
  if (!(params > 0 && tokens > 0)) throw ConfigError("tp_prior: params and tokens must be positive");
  PriorDecision d;
  d.ratio = tokens / params;
  if (params >= th.prior_max_params) {
    d.reason = "prior not applicable at or above " + stats::format_fixed(th.prior_max_params / 1e6, 0) + "M parameters";
    return d;
  }
  if (config && !config->gpt2_stack()) {
    d.reason = "prior not applicable to non-GPT-2-style stacks";
    return d;
  }
  if (d.ratio < th.tp_low) {
    d.verdict = Verdict::try_dyt;
    d.reason = "T/P below " + stats::format_fixed(th.tp_low, 2);
  } else if (d.ratio > th.tp_high) {
    d.verdict = Verdict::prefer_norm;
    d.reason = "T/P above " + stats::format_fixed(th.tp_high, 2);
  } else {
    d.reason = "T/P in the middle band";
  }
  return d;
}

struct CalibrationRun {
  RunRecord record;
  std::optional<probes::SaturationReport> saturation;  // absent when the run diverged
};

struct CalibrationOptions {
  std::size_t steps = 500;
  probes::SampleSpec sample;
  double probe_threshold = 2.0;
};

// Short DyT runs, one per seed, each followed by a saturation measurement at
// its final step.
template <class Real = float>
std::vector<CalibrationRun> calibrate(const ModelConfig& mc, const TrainConfig& base, const Split& train,
                                      const Split& val, const DataBudget& budget,
                                      const std::vector<std::uint64_t>& seeds, const CalibrationOptions& opt = {}) {
  if (mc.norm_kind != NormKind::dyt) throw ConfigError("calibration needs norm_kind = dyt");
  const std::size_t need = required_seeds(mc);
  if (seeds.size() < need)
    throw ConfigError("calibration needs at least " + std::to_string(need) + " seeds for this stack" +
                      (mc.llama_toggles() ? " (three when swiglu, rope or gqa is active)" : "") + ", got " +
                      std::to_string(seeds.size()));
  for (std::size_t i = 0; i < seeds.size(); ++i)
    for (std::size_t j = i + 1; j < seeds.size(); ++j)
      if (seeds[i] == seeds[j]) throw ConfigError("calibration seeds must be distinct");
  std::vector<CalibrationRun> out;
  for (std::uint64_t seed : seeds) {
    TrainConfig tc = base;
    tc.seed = seed;
    tc.max_steps = opt.steps;
    tc.warmup_steps = std::min(tc.warmup_steps, opt.steps / 10);
    tc.eval_interval = std::min(tc.eval_interval, opt.steps);
    auto res = train_run<Real>(mc, tc, train, val, budget);
    CalibrationRun run{std::move(res.record), std::nullopt};
    if (run.record.status != RunStatus::diverged) {
      try {
        run.saturation = probes::saturation(res.model, val, opt.sample, opt.probe_threshold);
        run.record.saturation = run.saturation->sigma;
      } catch (const NonFiniteError& e) {
        run.record.status = RunStatus::diverged;
        run.record.note = e.what();
      }
    }
    out.push_back(std::move(run));
  }
  return out;
}

struct ScreeningDecision {
  Verdict verdict = Verdict::needs_calibration;
  std::optional<double> mean_sigma;
  std::vector<std::optional<double>> sigmas;
  std::vector<CollapseFlags> flags;
  std::optional<PriorDecision> prior;
  nlohmann::json evidence = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& v : sigmas) s.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    nlohmann::json f = nlohmann::json::array();
    for (const auto& x : flags) f.push_back(x.to_json());
    return {{"verdict", name_of(verdict)},
            {"mean_sigma", mean_sigma ? nlohmann::json(*mean_sigma) : nlohmann::json(nullptr)},
            {"sigmas", s},
            {"collapse_flags", f},
            {"prior", prior ? prior->to_json() : nlohmann::json(nullptr)},
            {"evidence", evidence}};
  }
};

// Precedence: collapse, then the sigma threshold. The 0.43 cutoff belongs to
// the |alpha x| > 2 measurement, so any other probe threshold defers.
inline ScreeningDecision decide(const std::vector<CalibrationRun>& runs, const ModelConfig& config,
                                const Thresholds& th = {}) {
  ScreeningDecision d;
  std::vector<RunRecord> records;
  nlohmann::json run_ids = nlohmann::json::array();
  for (const auto& r : runs) {
    records.push_back(r.record);
    d.sigmas.push_back(r.saturation ? std::optional<double>(r.saturation->sigma) : std::nullopt);
    run_ids.push_back({{"run_id", r.record.run_id}, {"seed", r.record.seed}, {"status", normlab::name_of(r.record.status)}});
  }
  d.flags = detect_collapse(records, d.sigmas, config, th);
  double sum = 0;
  std::size_t n = 0;
  for (const auto& s : d.sigmas)
    if (s) {
      sum += *s;
      ++n;
    }
  if (n > 0) d.mean_sigma = sum / static_cast<double>(n);

  d.evidence["mode"] = "calibrated";
  d.evidence["runs"] = run_ids;
  d.evidence["thresholds"] = th.to_json();
  d.evidence["model"] = config.to_json();
  if (!runs.empty() && runs.front().saturation) d.evidence["sample"] = runs.front().saturation->spec.to_json();

  const bool collapse = std::any_of(d.flags.begin(), d.flags.end(), [](const CollapseFlags& f) { return f.any(); });
  if (collapse) {
    d.verdict = Verdict::unstable_abort;
    d.evidence["rule"] = "collapse flag set";
  } else if (th.probe_threshold != 2.0) {
    d.verdict = Verdict::needs_calibration;
    d.evidence["rule"] = "sigma cutoff is only defined for |alpha x| > 2";
  } else if (!d.mean_sigma) {
    d.verdict = Verdict::needs_calibration;
    d.evidence["rule"] = "no saturation measured";
  } else if (*d.mean_sigma > th.sigma_threshold) {
    d.verdict = Verdict::try_dyt;
    d.evidence["rule"] = "mean sigma above cutoff";
  } else {
    d.verdict = Verdict::prefer_norm;
    d.evidence["rule"] = "mean sigma at or below cutoff";
  }
  return d;
}

inline ScreeningDecision decide_prior(double params, double tokens, const ModelConfig* config = nullptr,
                                      const Thresholds& th = {}) {
  ScreeningDecision d;
  d.prior = tp_prior(params, tokens, config, th);
  d.verdict = d.prior->verdict;
  d.evidence["mode"] = "prior_only";
  d.evidence["params"] = params;
  d.evidence["tokens"] = tokens;
  d.evidence["thresholds"] = th.to_json();
  d.evidence["rule"] = d.prior->reason;
  return d;
}

}  // namespace normlab::screening
