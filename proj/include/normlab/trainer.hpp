// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "normlab/checkpoint.hpp"
#include "normlab/data.hpp"
#include "normlab/model.hpp"

namespace normlab {

struct TrainConfig {
  std::size_t max_steps = 1000;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 8;
  double lr_peak = 3e-4;
  std::size_t warmup_steps = 100;
  double min_lr = 0;  // 0 means lr_peak / 10
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // 0 disables clipping
  std::size_t batch_size = 16;
  std::size_t grad_accum = 1;
  std::uint64_t seed = 1337;
  std::uint64_t eval_seed = 0;          // eval batches are shared by every seed
  std::size_t checkpoint_interval = 0;  // 0: final checkpoint only

  double effective_min_lr() const { return min_lr > 0 ? min_lr : lr_peak / 10; }
  std::size_t effective_batch() const { return batch_size * grad_accum; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (max_steps == 0) fail("max_steps must be positive");
    if (warmup_steps >= max_steps) fail("warmup_steps must be < max_steps");
    if (!(lr_peak >= 0)) fail("lr_peak must be >= 0");
    if (lr_peak > 0 && !(effective_min_lr() > 0 && effective_min_lr() <= lr_peak))
      fail("min_lr must be in (0, lr_peak]");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
    if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
    if (!(grad_clip >= 0)) fail("grad_clip must be >= 0");
    if (batch_size == 0 || grad_accum == 0) fail("batch_size and grad_accum must be positive");
    if (eval_interval == 0 || eval_batches == 0) fail("eval_interval and eval_batches must be positive");
  }

  nlohmann::json to_json() const {
    return {{"max_steps", max_steps},       {"eval_interval", eval_interval},
            {"eval_batches", eval_batches}, {"lr_peak", lr_peak},
            {"warmup_steps", warmup_steps}, {"min_lr", effective_min_lr()},
            {"beta1", beta1},               {"beta2", beta2},
            {"eps", eps},                   {"weight_decay", weight_decay},
            {"grad_clip", grad_clip},       {"batch_size", batch_size},
            {"grad_accum", grad_accum},     {"seed", seed},
            {"eval_seed", eval_seed},       {"checkpoint_interval", checkpoint_interval}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
      c.max_steps = j.value("max_steps", c.max_steps);
      c.eval_interval = j.value("eval_interval", c.eval_interval);
      c.eval_batches = j.value("eval_batches", c.eval_batches);
      c.lr_peak = j.value("lr_peak", c.lr_peak);
      c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
      c.min_lr = j.value("min_lr", c.min_lr);
      c.beta1 = j.value("beta1", c.beta1);
      c.beta2 = j.value("beta2", c.beta2);
      c.eps = j.value("eps", c.eps);
      c.weight_decay = j.value("weight_decay", c.weight_decay);
      c.grad_clip = j.value("grad_clip", c.grad_clip);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.grad_accum = j.value("grad_accum", c.grad_accum);
      c.seed = j.value("seed", c.seed);
      c.eval_seed = j.value("eval_seed", c.eval_seed);
      c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("train config: ") + e.what());
    }
    return c;
  }
};

// Linear warmup from 0 at step 0 to lr_peak at warmup_steps, then cosine
// down to min_lr at max_steps. Update number i (1-based) uses lr_at(i).
inline double lr_at(std::size_t step, const TrainConfig& c) {
  const double peak = c.lr_peak, lo = c.effective_min_lr();
  if (step >= c.max_steps) return lo;
  if (step < c.warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double p = static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.max_steps - c.warmup_steps);
  return lo + 0.5 * (1 + std::cos(std::numbers::pi * p)) * (peak - lo);
}

template <class Real>
struct AdamState {
  std::vector<std::vector<Real>> m, v;
  std::size_t t = 0;

  explicit AdamState(const std::vector<Param<Real>>& params) {
    for (const auto& p : params) {
      m.emplace_back(p.value.size(), Real(0));
      v.emplace_back(p.value.size(), Real(0));
    }
  }
};

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// One AdamW update over every parameter. Decay is decoupled and applies only
// to parameters flagged for it (2-D weights). Parameters without a gradient
// buffer are treated as having zero gradient.
template <class Real>
void adamw_step(std::vector<Param<Real>>& params, AdamState<Real>& st, const AdamHyper& h) {
  ++st.t;
  const double bc1 = 1 - std::pow(h.beta1, static_cast<double>(st.t));
  const double bc2 = 1 - std::pow(h.beta2, static_cast<double>(st.t));
  const Real b1 = static_cast<Real>(h.beta1), b2 = static_cast<Real>(h.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    Real* w = p.value.data();
    const bool has = p.value.has_grad();
    const Real* g = has ? p.value.grad().data() : nullptr;
    auto& m = st.m[i];
    auto& v = st.v[i];
    const Real decay = p.decay ? static_cast<Real>(h.lr * h.weight_decay) : Real(0);
    for (std::size_t k = 0; k < m.size(); ++k) {
      const Real gk = has ? g[k] : Real(0);
      m[k] = b1 * m[k] + (1 - b1) * gk;
      v[k] = b2 * v[k] + (1 - b2) * gk * gk;
      const double mhat = static_cast<double>(m[k]) / bc1;
      const double vhat = static_cast<double>(v[k]) / bc2;
      if (decay != 0) w[k] -= decay * w[k];
      w[k] -= static_cast<Real>(h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

// Global L2 norm of all gradients; scales them down to max_norm if above.
// Returns the pre-clip norm.
template <class Real>
double clip_grad_norm(std::vector<Param<Real>>& params, double max_norm) {
  double ss = 0;
  for (const auto& p : params)
    if (p.value.has_grad())
      for (Real g : p.value.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const Real c = static_cast<Real>(max_norm / (norm + 1e-12));
    for (auto& p : params)
      if (p.value.has_grad())
        for (Real& g : p.value.grad()) g *= c;
  }
  return norm;
}

enum class RunStatus { completed, diverged, collapsed };

inline const char* name_of(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::diverged: return "diverged";
    case RunStatus::collapsed: return "collapsed";
  }
  return "?";
}

inline RunStatus parse_run_status(const std::string& s) {
  if (s == "completed") return RunStatus::completed;
  if (s == "diverged") return RunStatus::diverged;
  if (s == "collapsed") return RunStatus::collapsed;
  throw FormatError("unknown run status '" + s + "'");
}

struct EvalPoint {
  std::size_t step = 0;
  double train_loss = 0;
  double val_loss = 0;
};

inline constexpr int kRunRecordSchema = 1;

struct RunRecord {
  std::string run_id;
  std::string config_hash;
  std::uint64_t seed = 0;
  DataBudget budget;
  std::vector<EvalPoint> trace;
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double train_val_gap = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0;
  RunStatus status = RunStatus::completed;
  std::size_t effective_batch = 0;
  ModelConfig model;
  TrainConfig train;
  std::optional<double> saturation;  // global sigma, when measured
  std::string note;

  double initial_train_loss() const {
    return trace.empty() ? std::numeric_limits<double>::quiet_NaN() : trace.front().train_loss;
  }

  // Fills best/final/gap from the trace.
  void summarize() {
    best_val_loss = std::numeric_limits<double>::quiet_NaN();
    for (const auto& e : trace)
      if (std::isfinite(e.val_loss) && !(best_val_loss <= e.val_loss)) best_val_loss = e.val_loss;
    if (!trace.empty()) {
      final_train_loss = trace.back().train_loss;
      train_val_gap = trace.back().val_loss - trace.back().train_loss;
    }
  }

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& e : trace) tr.push_back({{"step", e.step}, {"train_loss", num(e.train_loss)}, {"val_loss", num(e.val_loss)}});
    nlohmann::json j = {{"schema", kRunRecordSchema},
                        {"run_id", run_id},
                        {"config_hash", config_hash},
                        {"seed", seed},
                        {"budget", {{"train_tokens", budget.train_tokens}, {"val_tokens", budget.val_tokens}, {"seed", budget.seed}}},
                        {"trace", tr},
                        {"best_val_loss", num(best_val_loss)},
                        {"final_train_loss", num(final_train_loss)},
                        {"train_val_gap", num(train_val_gap)},
                        {"wall_seconds", wall_seconds},
                        {"status", name_of(status)},
                        {"effective_batch", effective_batch},
                        {"model", model.to_json()},
                        {"train", train.to_json()}};
    if (saturation) j["saturation"] = *saturation;
    if (!note.empty()) j["note"] = note;
    return j;
  }

  static RunRecord from_json(const nlohmann::json& j) {
    auto num = [](const nlohmann::json& v) {
      return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    RunRecord r;
    try {
      if (j.value("schema", 0) != kRunRecordSchema) throw FormatError("unsupported run record schema");
      r.run_id = j.at("run_id").get<std::string>();
      r.config_hash = j.value("config_hash", std::string());
      r.seed = j.value("seed", std::uint64_t{0});
      const auto& b = j.at("budget");
      r.budget = {b.value("train_tokens", std::size_t{0}), b.value("val_tokens", std::size_t{0}),
                  b.value("seed", std::uint64_t{0})};
      for (const auto& e : j.value("trace", nlohmann::json::array()))
        r.trace.push_back({e.at("step").get<std::size_t>(), num(e.at("train_loss")), num(e.at("val_loss"))});
      r.best_val_loss = num(j.value("best_val_loss", nlohmann::json()));
      r.final_train_loss = num(j.value("final_train_loss", nlohmann::json()));
      r.train_val_gap = num(j.value("train_val_gap", nlohmann::json()));
      r.wall_seconds = j.value("wall_seconds", 0.0);
      r.status = parse_run_status(j.value("status", std::string("completed")));
      r.effective_batch = j.value("effective_batch", std::size_t{0});
      r.model = ModelConfig::from_json(j.value("model", nlohmann::json::object()));
      r.train = TrainConfig::from_json(j.value("train", nlohmann::json::object()));
      if (j.contains("saturation") && !j["saturation"].is_null()) r.saturation = j["saturation"].get<double>();
      r.note = j.value("note", std::string());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed run record: ") + e.what());
    }
    return r;
  }
};

// Cell identity: hash of (model config, budget, seed) plus the train config,
// so a cell re-run with different training settings is a different cell.
inline std::string cell_id(const ModelConfig& m, const TrainConfig& t, const DataBudget& b) {
  nlohmann::json key = {{"model", m.to_json()},
                        {"train", t.to_json()},
                        {"budget", {b.train_tokens, b.val_tokens, b.seed}},
                        {"seed", t.seed}};
  return hex64(fnv1a(key.dump()));
}

// Mean loss over tokens B x (T+1) (next-token targets).
template <class Real>
Tensor<Real> batch_loss(Tape<Real>& tape, const Model<Real>& model, std::span<const TokenId> batch, std::size_t B,
                        const ForwardOptions<Real>& opt = {}) {
  const std::size_t span = batch.size() / B, T = span - 1;
  std::vector<TokenId> x(B * T), y(B * T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      x[b * T + t] = batch[b * span + t];
      y[b * T + t] = batch[b * span + t + 1];
    }
  return ops::cross_entropy(tape, model.forward(tape, x, B, T, opt), y);
}

template <class Real>
double eval_loss(const Model<Real>& model, const Split& split, const TrainConfig& tc) {
  double total = 0;
  const std::size_t T = model.config().block_size;
  for (std::size_t i = 0; i < tc.eval_batches; ++i) {
    Tape<Real> tape(false);
    const auto batch = batches(split, tc.batch_size, T, tc.eval_seed, i);
    total += static_cast<double>(batch_loss(tape, model, batch, tc.batch_size).item());
  }
  return total / static_cast<double>(tc.eval_batches);
}

struct TrainHooks {
  std::optional<std::filesystem::path> checkpoint_dir;  // final (and interval) checkpoints
  std::function<void(const EvalPoint&)> on_eval;
};

template <class Real>
struct RunResult {
  RunRecord record;
  Model<Real> model;
};

template <class Real = float>
RunResult<Real> train_run(const ModelConfig& mc, const TrainConfig& tc, const Split& train, const Split& val,
                          const DataBudget& budget, const TrainHooks& hooks = {}) {
  mc.validate();
  tc.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunResult<Real> res{RunRecord{}, Model<Real>(mc, tc.seed)};
  RunRecord& rec = res.record;
  Model<Real>& model = res.model;
  rec.run_id = cell_id(mc, tc, budget);
  rec.config_hash = hex64(mc.hash());
  rec.seed = tc.seed;
  rec.budget = budget;
  rec.effective_batch = tc.effective_batch();
  rec.model = mc;
  rec.train = tc;

  const std::size_t T = mc.block_size;
  auto evaluate = [&](std::size_t step) {
    EvalPoint e{step, eval_loss(model, train, tc), eval_loss(model, val, tc)};
    rec.trace.push_back(e);
    if (hooks.on_eval) hooks.on_eval(e);
  };
  auto checkpoint = [&](std::size_t step, const std::string& name) {
    if (hooks.checkpoint_dir) save_checkpoint(model, step, *hooks.checkpoint_dir / name);
  };

  AdamState<Real> opt(model.params());
  try {
    evaluate(0);
    for (std::size_t step = 1; step <= tc.max_steps; ++step) {
      for (auto& p : model.params()) p.value.zero_grad();
      for (std::size_t micro = 0; micro < tc.grad_accum; ++micro) {
        const std::uint64_t draw = (step - 1) * tc.grad_accum + micro;
        const auto batch = batches(train, tc.batch_size, T, tc.seed, draw);
        Tape<Real> tape;
        ForwardOptions<Real> fo;
        fo.train = true;
        fo.dropout_key = mix64(tc.seed, 0xd70u, draw);
        Tensor<Real> loss = batch_loss(tape, model, batch, tc.batch_size, fo);
        if (tc.grad_accum > 1) loss = ops::scale(tape, loss, Real(1) / static_cast<Real>(tc.grad_accum));
        tape.backward(loss);
      }
      const double norm = clip_grad_norm(model.params(), tc.grad_clip);
      if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm at step " + std::to_string(step));
      AdamHyper h{lr_at(step, tc), tc.beta1, tc.beta2, tc.eps, tc.weight_decay};
      adamw_step(model.params(), opt, h);
      if (step % tc.eval_interval == 0 || step == tc.max_steps) evaluate(step);
      if (tc.checkpoint_interval > 0 && step % tc.checkpoint_interval == 0 && step != tc.max_steps)
        checkpoint(step, "step_" + std::to_string(step) + ".nlck");
    }
    checkpoint(tc.max_steps, "final.nlck");
  } catch (const NonFiniteError& e) {
    rec.status = RunStatus::diverged;
    rec.note = e.what();
  }
  rec.summarize();
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace normlab
