// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "normlab/data.hpp"
#include "normlab/model.hpp"

namespace normlab::probes {

// Fixed sample of forward passes. seq is clamped to the model's block_size.
struct SampleSpec {
  std::size_t n_batches = 50;
  std::size_t batch_size = 1;
  std::size_t seq = 512;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"n_batches", n_batches}, {"batch_size", batch_size}, {"seq", seq}, {"seed", seed}};
  }
};

// Input rows for batch i of a spec: B x T tokens.
inline std::vector<TokenId> sample_tokens(const Split& split, std::size_t B, std::size_t T, std::uint64_t seed,
                                          std::size_t i) {
  const auto rows = batches(split, B, T, seed ^ 0x5a3b1e5ULL, i);
  std::vector<TokenId> x(B * T);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(b * (T + 1)), T, x.begin() + static_cast<std::ptrdiff_t>(b * T));
  return x;
}

// ---- saturation -----------------------------------------------------------

struct SiteCount {
  std::string name;
  double alpha = 1;
  std::size_t tail = 0;   // entries with |alpha * a| > threshold
  std::size_t total = 0;

  double fraction() const { return total == 0 ? 0.0 : static_cast<double>(tail) / static_cast<double>(total); }
};

struct SaturationReport {
  std::string key;  // what was counted, e.g. "abs_alpha_x_gt_2"
  double threshold = 2.0;
  std::vector<SiteCount> sites;
  double sigma = 0;       // total tail count / total count
  double mean_alpha = 0;  // unweighted mean over sites
  SampleSpec spec;
  std::size_t seq_used = 0;

  nlohmann::json to_json() const {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& c : sites)
      s.push_back({{"site", c.name}, {"alpha", c.alpha}, {"fraction", c.fraction()}, {"tail", c.tail}, {"total", c.total}});
    return {{"key", key},           {"threshold", threshold}, {"sigma", sigma}, {"mean_alpha", mean_alpha},
            {"mean_alpha_kind", "site_mean"}, {"sample", spec.to_json()}, {"seq_used", seq_used}, {"sites", s}};
  }
};

// Adds |alpha * a| > threshold counts for one site input.
template <class Real>
void count_tail(SiteCount& site, std::span<const Real> a, double threshold) {
  std::size_t k = 0;
  for (Real v : a) k += std::fabs(site.alpha * static_cast<double>(v)) > threshold;
  site.tail += k;
  site.total += a.size();
}

// Fills sigma and mean_alpha from the per-site counts.
inline void finalize(SaturationReport& r) {
  std::size_t tail = 0, total = 0;
  double a = 0;
  for (const auto& s : r.sites) {
    tail += s.tail;
    total += s.total;
    a += s.alpha;
  }
  r.sigma = total == 0 ? 0.0 : static_cast<double>(tail) / static_cast<double>(total);
  r.mean_alpha = r.sites.empty() ? 0.0 : a / static_cast<double>(r.sites.size());
}

namespace detail {

template <class Real>
SaturationReport tail_fraction(const Model<Real>& model, const Split& split, const SampleSpec& spec, double threshold,
                               bool use_alpha, std::string key) {
  if (spec.n_batches == 0 || spec.batch_size == 0 || spec.seq == 0) throw ConfigError("sample spec must be positive");
  const auto& cfg = model.config();
  SaturationReport r;
  r.key = std::move(key);
  r.threshold = threshold;
  r.spec = spec;
  r.seq_used = std::min(spec.seq, cfg.block_size);
  const auto alphas = model.alphas();
  for (std::size_t s = 0; s < cfg.n_norm_sites(); ++s)
    r.sites.push_back({Model<Real>::site_name(s, cfg.n_layer), use_alpha ? alphas.at(s) : 1.0, 0, 0});
  for (std::size_t i = 0; i < spec.n_batches; ++i) {
    const auto x = sample_tokens(split, spec.batch_size, r.seq_used, spec.seed, i);
    Tape<Real> tape(false);
    ProbeTaps<Real> taps;
    ForwardOptions<Real> fo;
    fo.taps = &taps;
    model.forward(tape, x, spec.batch_size, r.seq_used, fo);
    for (std::size_t s = 0; s < r.sites.size(); ++s) count_tail<Real>(r.sites[s], taps.norm_inputs.at(s).values(), threshold);
  }
  finalize(r);
  return r;
}

}  // namespace detail

// Fraction of norm-site inputs in the flat tanh tail, |alpha * a| > threshold,
// over every site including ln_f. DyT models only.
template <class Real>
SaturationReport saturation(const Model<Real>& model, const Split& split, const SampleSpec& spec = {},
                            double threshold = 2.0) {
  if (model.config().norm_kind != NormKind::dyt)
    throw ConfigError(std::string("saturation needs a dyt model, got ") + name_of(model.config().norm_kind) +
                      " (use hardtanh_saturation for hardtanh)");
  if (!(threshold > 0)) throw ConfigError("saturation threshold must be > 0");
  char key[48];
  std::snprintf(key, sizeof key, "abs_alpha_x_gt_%g", threshold);
  return detail::tail_fraction(model, split, spec, threshold, true, key);
}

// Clip fraction for the hardtanh control: |a| > 1.
template <class Real>
SaturationReport hardtanh_saturation(const Model<Real>& model, const Split& split, const SampleSpec& spec = {}) {
  if (model.config().norm_kind != NormKind::hardtanh)
    throw ConfigError(std::string("hardtanh_saturation needs a hardtanh model, got ") + name_of(model.config().norm_kind));
  return detail::tail_fraction(model, split, spec, 1.0, false, "hardtanh_abs_x_gt_1");
}

enum class SatVerdict { helps, hurts };

inline const char* name_of(SatVerdict v) { return v == SatVerdict::helps ? "helps" : "hurts"; }

inline SatVerdict classify_saturation(double sigma, double threshold = 0.43) {
  if (!(sigma >= 0 && sigma <= 1)) throw ConfigError("saturation fraction must be in [0, 1]");
  return sigma > threshold ? SatVerdict::helps : SatVerdict::hurts;
}

struct AlphaReport {
  std::vector<std::string> sites;
  std::vector<double> alphas;
  double mean = 0;

  nlohmann::json to_json() const {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t i = 0; i < sites.size(); ++i) a.push_back({{"site", sites[i]}, {"alpha", alphas[i]}});
    return {{"sites", a}, {"mean_alpha", mean}};
  }
};

template <class Real>
AlphaReport alpha_report(const Model<Real>& model) {
  const auto& cfg = model.config();
  if (cfg.norm_kind != NormKind::dyt) throw ConfigError("alpha report needs a dyt model");
  AlphaReport r;
  r.alphas = model.alphas();
  for (std::size_t s = 0; s < r.alphas.size(); ++s) r.sites.push_back(Model<Real>::site_name(s, cfg.n_layer));
  for (double a : r.alphas) r.mean += a;
  r.mean /= static_cast<double>(r.alphas.size());
  return r;
}

// ---- spectra ----------------------------------------------------------------

// Singular values of a rows x cols row-major matrix, descending, by one-sided
// Jacobi rotations on the columns of the taller orientation.
inline std::vector<double> singular_values(std::span<const double> a, std::size_t rows, std::size_t cols) {
  if (a.size() != rows * cols || rows == 0 || cols == 0) throw ShapeError("singular_values: bad matrix shape");
  const bool tr = cols > rows;
  const std::size_t m = tr ? cols : rows, n = tr ? rows : cols;
  // column-major working copy: col j at w[j*m, (j+1)*m)
  std::vector<double> w(m * n);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = a[i * cols + j];
      if (tr) w[i * m + j] = v;
      else w[j * m + i] = v;
    }
  constexpr double tol = 1e-13;
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = &w[p * m];
        double* cq = &w[q * m];
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0 || std::fabs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::fabs(zeta) + std::sqrt(1 + zeta * zeta));
        const double c = 1 / std::sqrt(1 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
      }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double ss = 0;
    for (std::size_t i = 0; i < m; ++i) ss += w[j * m + i] * w[j * m + i];
    sv[j] = std::sqrt(ss);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

// exp(H(p)) with p_i = s_i / sum(s), natural log.
inline double effective_rank(std::span<const double> sv) {
  double total = 0;
  for (double s : sv) {
    if (s < 0 || !std::isfinite(s)) throw ConfigError("effective_rank: singular values must be finite and >= 0");
    total += s;
  }
  if (!(total > 0)) throw ConfigError("effective_rank: all singular values are zero");
  double h = 0;
  for (double s : sv)
    if (s > 0) {
      const double p = s / total;
      h -= p * std::log(p);
    }
  return std::exp(h);
}

inline double effective_rank(std::span<const double> a, std::size_t rows, std::size_t cols) {
  const auto sv = singular_values(a, rows, cols);
  return effective_rank(sv);
}

struct ActivationRank {
  std::vector<double> per_block;
  double mean = 0;
  std::size_t rows = 0;  // B * T
  std::size_t d_model = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    return {{"per_block", per_block}, {"mean", mean}, {"rows", rows}, {"d_model", d_model}, {"warnings", warnings}};
  }
};

// Effective rank of each block's output reshaped to (B*T, d_model) for one
// batch of B sequences.
template <class Real>
ActivationRank activation_effective_rank(const Model<Real>& model, const Split& split, std::size_t batch_size = 16,
                                         std::size_t seq = 0, std::uint64_t seed = 0) {
  const auto& cfg = model.config();
  const std::size_t T = seq == 0 ? cfg.block_size : std::min(seq, cfg.block_size);
  ActivationRank r;
  r.rows = batch_size * T;
  r.d_model = cfg.d_model;
  if (r.rows < cfg.d_model)
    r.warnings.push_back("B*T = " + std::to_string(r.rows) + " < d_model = " + std::to_string(cfg.d_model) +
                         "; rank ceiling is B*T");
  const auto x = sample_tokens(split, batch_size, T, seed ^ 0xac7ULL, 0);
  Tape<Real> tape(false);
  ProbeTaps<Real> taps;
  ForwardOptions<Real> fo;
  fo.taps = &taps;
  model.forward(tape, x, batch_size, T, fo);
  for (const auto& out : taps.block_outputs) {
    std::vector<double> m(out.values().begin(), out.values().end());
    r.per_block.push_back(effective_rank(m, r.rows, cfg.d_model));
  }
  for (double v : r.per_block) r.mean += v;
  if (!r.per_block.empty()) r.mean /= static_cast<double>(r.per_block.size());
  return r;
}

struct MatrixView {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
};

struct WeightGeometry {
  struct Entry {
    std::string name;
    std::size_t rows = 0, cols = 0;
    std::optional<double> eff_rank;  // absent for an all-zero matrix
  };
  std::vector<Entry> matrices;
  double mean_eff_rank = std::numeric_limits<double>::quiet_NaN();
  double frobenius = 0;  // over every learnable parameter

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::array();
    for (const auto& e : matrices)
      m.push_back({{"name", e.name},
                   {"shape", {e.rows, e.cols}},
                   {"eff_rank", e.eff_rank ? nlohmann::json(*e.eff_rank) : nlohmann::json(nullptr)}});
    return {{"matrices", m},
            {"mean_eff_rank", std::isfinite(mean_eff_rank) ? nlohmann::json(mean_eff_rank) : nlohmann::json(nullptr)},
            {"frobenius", frobenius}};
  }
};

// matrices: the 2-D weights to rank. extra: remaining parameters that only
// contribute to the Frobenius total.
inline WeightGeometry weight_geometry(const std::vector<MatrixView>& matrices,
                                      const std::vector<std::vector<double>>& extra = {}) {
  WeightGeometry g;
  double ss = 0, rank_sum = 0;
  std::size_t ranked = 0;
  for (const auto& m : matrices) {
    WeightGeometry::Entry e{m.name, m.rows, m.cols, std::nullopt};
    for (double v : m.values) ss += v * v;
    const auto sv = singular_values(m.values, m.rows, m.cols);
    if (sv.front() > 0) {
      e.eff_rank = effective_rank(sv);
      rank_sum += *e.eff_rank;
      ++ranked;
    }
    g.matrices.push_back(std::move(e));
  }
  for (const auto& v : extra)
    for (double x : v) ss += x * x;
  g.frobenius = std::sqrt(ss);
  if (ranked > 0) g.mean_eff_rank = rank_sum / static_cast<double>(ranked);
  return g;
}

template <class Real>
WeightGeometry weight_geometry(const Model<Real>& model) {
  std::vector<MatrixView> mats;
  std::vector<std::vector<double>> extra;
  for (const auto& p : model.params()) {
    std::vector<double> v(p.value.values().begin(), p.value.values().end());
    if (p.value.rank() == 2) mats.push_back({p.name, p.value.dim(0), p.value.dim(1), std::move(v)});
    else extra.push_back(std::move(v));
  }
  return weight_geometry(mats, extra);
}

// ---- lipschitz --------------------------------------------------------------

struct LipschitzStats {
  double eps = 0;
  std::size_t trials = 0;
  double mean = 0, min = 0, max = 0;

  nlohmann::json to_json() const {
    return {{"eps", eps}, {"trials", trials}, {"mean", mean}, {"min", min}, {"max", max}};
  }
};

// ||f(x + d) - f(x)|| / ||d|| with d = eps * N(0, I), averaged over trials.
// f maps a flat input vector to a flat output vector.
template <class F>
LipschitzStats lipschitz_ratio(F&& f, std::span<const double> x, double eps, std::size_t trials,
                               std::uint64_t seed = 0) {
  if (!(eps > 0)) throw ConfigError("lipschitz probe: eps must be > 0");
  if (trials == 0) throw ConfigError("lipschitz probe: trials must be >= 1");
  const std::vector<double> base = f(std::vector<double>(x.begin(), x.end()));
  LipschitzStats s{eps, trials, 0, std::numeric_limits<double>::infinity(), 0};
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng(mix64(seed, 0x11b5ULL, t), 0);
    std::vector<double> xp(x.begin(), x.end());
    double dn = 0;
    for (double& v : xp) {
      const double d = eps * rng.normal();
      v += d;
      dn += d * d;
    }
    const std::vector<double> out = f(xp);
    if (out.size() != base.size()) throw ShapeError("lipschitz probe: output size changed");
    double on = 0;
    for (std::size_t i = 0; i < out.size(); ++i) on += (out[i] - base[i]) * (out[i] - base[i]);
    const double ratio = std::sqrt(on) / std::sqrt(dn);
    s.mean += ratio;
    s.min = std::min(s.min, ratio);
    s.max = std::max(s.max, ratio);
  }
  s.mean /= static_cast<double>(trials);
  return s;
}

// Perturbs the post-embedding activations of one batch and measures the
// change at the logits.
template <class Real>
LipschitzStats lipschitz_probe(const Model<Real>& model, std::span<const TokenId> tokens, std::size_t B,
                               std::size_t T, double eps = 0.01, std::size_t trials = 3, std::uint64_t seed = 0) {
  Tape<Real> tape(false);
  const Tensor<Real> emb = model.embed(tape, tokens, B, T);
  const Shape shape = emb.shape();
  std::vector<double> x(emb.values().begin(), emb.values().end());
  auto f = [&](const std::vector<double>& in) {
    std::vector<Real> v(in.begin(), in.end());
    Tape<Real> t(false);
    const auto logits = model.forward_embedded(t, Tensor<Real>::from(shape, std::move(v)));
    return std::vector<double>(logits.values().begin(), logits.values().end());
  };
  return lipschitz_ratio(f, x, eps, trials, seed);
}

struct GeometryReport {
  WeightGeometry weights;
  std::optional<ActivationRank> activations;
  std::vector<LipschitzStats> lipschitz;

  nlohmann::json to_json() const {
    nlohmann::json l = nlohmann::json::array();
    for (const auto& s : lipschitz) l.push_back(s.to_json());
    return {{"weights", weights.to_json()},
            {"activations", activations ? activations->to_json() : nlohmann::json(nullptr)},
            {"lipschitz", l}};
  }
};

}  // namespace normlab::probes
