// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "normlab/ops.hpp"

namespace normlab {

using ops::TokenId;

enum class NormKind { layernorm, rmsnorm, dyt, hardtanh };
enum class AttnKind { standard, diff_v1, diff_sigmoid };
enum class FfnKind { gelu, swiglu };
enum class PosKind { learned, rope };

inline const char* name_of(NormKind k) {
  switch (k) {
    case NormKind::layernorm: return "layernorm";
    case NormKind::rmsnorm: return "rmsnorm";
    case NormKind::dyt: return "dyt";
    case NormKind::hardtanh: return "hardtanh";
  }
  return "?";
}
inline const char* name_of(AttnKind k) {
  switch (k) {
    case AttnKind::standard: return "standard";
    case AttnKind::diff_v1: return "diff_v1";
    case AttnKind::diff_sigmoid: return "diff_sigmoid";
  }
  return "?";
}
inline const char* name_of(FfnKind k) { return k == FfnKind::gelu ? "gelu" : "swiglu"; }
inline const char* name_of(PosKind k) { return k == PosKind::learned ? "learned" : "rope"; }

namespace detail {
template <class E, std::size_t N>
E parse_enum(const std::string& s, const E (&all)[N], const char* what) {
  for (E e : all)
    if (s == name_of(e)) return e;
  std::string opts;
  for (E e : all) opts += std::string(opts.empty() ? "" : "|") + name_of(e);
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected " + opts + ")");
}
}  // namespace detail

inline NormKind parse_norm_kind(const std::string& s) {
  static constexpr NormKind all[] = {NormKind::layernorm, NormKind::rmsnorm, NormKind::dyt, NormKind::hardtanh};
  return detail::parse_enum(s, all, "norm_kind");
}
inline AttnKind parse_attn_kind(const std::string& s) {
  static constexpr AttnKind all[] = {AttnKind::standard, AttnKind::diff_v1, AttnKind::diff_sigmoid};
  return detail::parse_enum(s, all, "attn_kind");
}
inline FfnKind parse_ffn_kind(const std::string& s) {
  static constexpr FfnKind all[] = {FfnKind::gelu, FfnKind::swiglu};
  return detail::parse_enum(s, all, "ffn_kind");
}
inline PosKind parse_pos_kind(const std::string& s) {
  static constexpr PosKind all[] = {PosKind::learned, PosKind::rope};
  return detail::parse_enum(s, all, "pos_kind");
}

// One record fully determines a model's architecture and initialization.
struct ModelConfig {
  std::size_t n_layer = 4;
  std::size_t n_head = 4;
  std::size_t n_kv_head = 0;  // 0 means n_head (no grouping)
  std::size_t d_model = 128;
  std::size_t vocab_size = 256;
  std::size_t block_size = 64;
  NormKind norm_kind = NormKind::layernorm;
  AttnKind attn_kind = AttnKind::standard;
  FfnKind ffn_kind = FfnKind::gelu;
  PosKind pos_kind = PosKind::learned;
  double alpha_init = 2.0;
  double dropout_p = 0.0;
  bool weight_tying = true;
  double diff_lambda_init = 0.0;  // constant added to exp-form lambda; output is scaled by (1 - it)
  double rope_base = 10000.0;

  std::size_t kv_heads() const { return n_kv_head == 0 ? n_head : n_kv_head; }
  std::size_t head_dim() const { return d_model / n_head; }
  std::size_t n_norm_sites() const { return 2 * n_layer + 1; }
  bool is_diff() const { return attn_kind != AttnKind::standard; }

  // gelu: 4D. swiglu: 8D/3 rounded up to a multiple of 8.
  std::size_t ffn_hidden() const {
    if (ffn_kind == FfnKind::gelu) return 4 * d_model;
    const std::size_t raw = (8 * d_model + 2) / 3;
    return (raw + 7) / 8 * 8;
  }

  // True when any of the Llama-style toggles is on.
  bool llama_toggles() const {
    return ffn_kind == FfnKind::swiglu || pos_kind == PosKind::rope || kv_heads() != n_head;
  }
  // Any norm kind on the GPT-2 layout: standard attention, gelu, learned PE, no GQA.
  bool gpt2_stack() const { return !llama_toggles() && !is_diff(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (n_layer == 0 || n_head == 0 || d_model == 0 || vocab_size == 0 || block_size == 0)
      fail("n_layer, n_head, d_model, vocab_size and block_size must be positive");
    if (d_model % n_head != 0)
      fail("d_model " + std::to_string(d_model) + " is not divisible by n_head " + std::to_string(n_head));
    if (kv_heads() > n_head || n_head % kv_heads() != 0)
      fail("n_kv_head " + std::to_string(kv_heads()) + " must divide n_head " + std::to_string(n_head));
    if (norm_kind == NormKind::dyt && !(alpha_init > 0)) fail("alpha_init must be > 0 for dyt");
    if (!(dropout_p >= 0 && dropout_p < 1)) fail("dropout_p must be in [0, 1)");
    if (is_diff() && n_head % 2 != 0) fail("differential attention needs an even n_head");
    if (is_diff() && kv_heads() % 2 != 0) fail("differential attention needs an even n_kv_head");
    if (pos_kind == PosKind::rope && head_dim() % 2 != 0)
      fail("rope needs an even head_dim, got " + std::to_string(head_dim()));
    if (!(rope_base > 1)) fail("rope_base must be > 1");
  }

  nlohmann::json to_json() const {
    return {{"n_layer", n_layer},
            {"n_head", n_head},
            {"n_kv_head", kv_heads()},
            {"d_model", d_model},
            {"vocab_size", vocab_size},
            {"block_size", block_size},
            {"norm_kind", name_of(norm_kind)},
            {"attn_kind", name_of(attn_kind)},
            {"ffn_kind", name_of(ffn_kind)},
            {"pos_kind", name_of(pos_kind)},
            {"alpha_init", alpha_init},
            {"dropout_p", dropout_p},
            {"weight_tying", weight_tying},
            {"diff_lambda_init", diff_lambda_init},
            {"rope_base", rope_base}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
      c.n_layer = j.value("n_layer", c.n_layer);
      c.n_head = j.value("n_head", c.n_head);
      c.n_kv_head = j.value("n_kv_head", c.n_kv_head);
      c.d_model = j.value("d_model", c.d_model);
      c.vocab_size = j.value("vocab_size", c.vocab_size);
      c.block_size = j.value("block_size", c.block_size);
      c.norm_kind = parse_norm_kind(j.value("norm_kind", std::string(name_of(c.norm_kind))));
      c.attn_kind = parse_attn_kind(j.value("attn_kind", std::string(name_of(c.attn_kind))));
      c.ffn_kind = parse_ffn_kind(j.value("ffn_kind", std::string(name_of(c.ffn_kind))));
      c.pos_kind = parse_pos_kind(j.value("pos_kind", std::string(name_of(c.pos_kind))));
      c.alpha_init = j.value("alpha_init", c.alpha_init);
      c.dropout_p = j.value("dropout_p", c.dropout_p);
      c.weight_tying = j.value("weight_tying", c.weight_tying);
      c.diff_lambda_init = j.value("diff_lambda_init", c.diff_lambda_init);
      c.rope_base = j.value("rope_base", c.rope_base);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    if (c.n_kv_head == c.n_head) c.n_kv_head = 0;
    return c;
  }

  bool operator==(const ModelConfig& o) const { return to_json() == o.to_json(); }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

// Closed-form GPT-2 parameter count with a tied output head:
//   P = V*D + T*D + L*(12*D^2 + 13*D) + 2*D
// (token and position tables, per block: qkv and output projections with
// biases, 4x MLP with biases, two layernorms; then the final layernorm).
inline std::size_t gpt2_param_count(std::size_t n_layer, std::size_t d_model, std::size_t vocab_size,
                                    std::size_t block_size) {
  const std::size_t D = d_model;
  return vocab_size * D + block_size * D + n_layer * (12 * D * D + 13 * D) + 2 * D;
}

template <class Real>
struct Param {
  std::string name;
  Tensor<Real> value;
  bool decay = false;
};

// Learnable parameters of one norm site. Unused members stay undefined:
// alpha exists only for dyt, beta is absent for rmsnorm.
template <class Real>
struct NormParams {
  Tensor<Real> alpha, gamma, beta;
};

template <class Real>
Tensor<Real> norm_apply(Tape<Real>& tape, NormKind kind, const Tensor<Real>& x, const NormParams<Real>& p) {
  auto need = [&](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("norm_apply(") + name_of(kind) + "): missing " + what);
  };
  need(p.gamma.defined(), "gamma");
  switch (kind) {
    case NormKind::layernorm:
      need(p.beta.defined(), "beta");
      return ops::layer_norm(tape, x, p.gamma, p.beta);
    case NormKind::rmsnorm:
      return ops::rms_norm(tape, x, p.gamma);
    case NormKind::dyt:
      need(p.alpha.defined(), "alpha");
      need(p.beta.defined(), "beta");
      return ops::dyt(tape, x, p.alpha, p.gamma, p.beta);
    case NormKind::hardtanh:
      need(p.beta.defined(), "beta");
      return ops::hardtanh_norm(tape, x, p.gamma, p.beta);
  }
  throw ConfigError("norm_apply: unknown kind");
}

template <class Real>
struct AttnParams {
  Tensor<Real> c_attn_w, c_attn_b, c_proj_w, c_proj_b;
  Tensor<Real> lambda_q1, lambda_k1, lambda_q2, lambda_k2;  // diff_v1
  Tensor<Real> lambda_raw;                                  // diff_sigmoid, one per head pair
  Tensor<Real> subln;                                       // per-head RMS gain, flat [pairs * 2 * head_dim]
};

template <class Real>
struct FfnParams {
  Tensor<Real> c_fc_w, c_fc_b;      // gelu: W_in; swiglu: W_1 (linear branch)
  Tensor<Real> c_gate_w, c_gate_b;  // swiglu: W_2 (SiLU branch)
  Tensor<Real> c_proj_w, c_proj_b;
};

template <class Real>
struct BlockParams {
  NormParams<Real> ln_1, ln_2;
  AttnParams<Real> attn;
  FfnParams<Real> mlp;
};

// Read-only captures made during forward. norm_inputs holds the input array
// of every norm site in order h.0.ln_1, h.0.ln_2, h.1.ln_1, ..., ln_f.
template <class Real>
struct ProbeTaps {
  std::vector<Tensor<Real>> norm_inputs;
  std::vector<Tensor<Real>> block_outputs;
};

template <class Real>
struct ForwardOptions {
  bool train = false;             // enables dropout
  std::uint64_t dropout_key = 0;  // per-step key; sites derive sub-keys
  ProbeTaps<Real>* taps = nullptr;
};

// Test hook for differential attention: pin lambda and/or bypass the
// per-head stabilizer.
struct DiffOverride {
  std::optional<double> lambda;
  bool identity_stabilizer = false;
};

template <class Real>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param<Real>>& params() { return params_; }
  const std::vector<Param<Real>>& params() const { return params_; }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  const Param<Real>& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw ConfigError("no parameter named '" + name + "'");
  }
  Param<Real>& param(const std::string& name) {
    return const_cast<Param<Real>&>(static_cast<const Model&>(*this).param(name));
  }

  // Norm sites in tap order.
  std::vector<const NormParams<Real>*> norm_sites() const {
    std::vector<const NormParams<Real>*> out;
    for (const auto& b : blocks_) {
      out.push_back(&b.ln_1);
      out.push_back(&b.ln_2);
    }
    out.push_back(&ln_f_);
    return out;
  }

  static std::string site_name(std::size_t site, std::size_t n_layer) {
    if (site == 2 * n_layer) return "ln_f";
    return "h." + std::to_string(site / 2) + (site % 2 == 0 ? ".ln_1" : ".ln_2");
  }

  // Learned alpha per site (dyt only).
  std::vector<double> alphas() const {
    std::vector<double> out;
    if (cfg_.norm_kind != NormKind::dyt) return out;
    for (const auto* s : norm_sites()) out.push_back(static_cast<double>(s->alpha.item()));
    return out;
  }

  // Effective lambda per layer (mean over head pairs for the sigmoid form).
  std::vector<double> lambdas() const {
    std::vector<double> out;
    if (!cfg_.is_diff()) return out;
    Tape<Real> tape(false);
    for (const auto& b : blocks_) {
      auto l = lambda(tape, b.attn);
      double s = 0;
      for (Real v : l.values()) s += v;
      out.push_back(s / static_cast<double>(l.size()));
    }
    return out;
  }

  DiffOverride diff_override;

  // Deep copy: the result shares no storage with this model.
  Model clone() const {
    Model m(cfg_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto src = params_[i].value.values();
      std::copy(src.begin(), src.end(), m.params_[i].value.data());
    }
    m.diff_override = diff_override;
    return m;
  }

  // Token (plus learned position) embedding for tokens[B*T]: [B, T, D].
  Tensor<Real> embed(Tape<Real>& tape, std::span<const TokenId> tokens, std::size_t B, std::size_t T) const {
    if (T > cfg_.block_size)
      throw ShapeError("sequence length " + std::to_string(T) + " exceeds block_size " +
                       std::to_string(cfg_.block_size));
    if (tokens.size() != B * T)
      throw ShapeError("expected " + std::to_string(B * T) + " tokens, got " + std::to_string(tokens.size()));
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] >= cfg_.vocab_size)
        throw ShapeError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                         " is out of range for vocab " + std::to_string(cfg_.vocab_size));
    Tensor<Real> x = ops::gather_rows(tape, wte_, tokens, Shape{B, T});
    if (cfg_.pos_kind == PosKind::learned) {
      std::vector<TokenId> pos(T);
      for (std::size_t t = 0; t < T; ++t) pos[t] = static_cast<TokenId>(t);
      x = ops::add(tape, x, ops::gather_rows(tape, wpe_, pos, Shape{T}));
    }
    return x;
  }

  // Logits [B, T, V] from post-embedding activations x[B, T, D].
  Tensor<Real> forward_embedded(Tape<Real>& tape, Tensor<Real> x, const ForwardOptions<Real>& opt = {}) const {
    if (x.rank() != 3 || x.dim(2) != cfg_.d_model)
      throw ShapeError("forward_embedded: expects [B, T, " + std::to_string(cfg_.d_model) + "], got " +
                       to_string(x.shape()));
    if (x.dim(1) > cfg_.block_size)
      throw ShapeError("sequence length " + std::to_string(x.dim(1)) + " exceeds block_size " +
                       std::to_string(cfg_.block_size));
    std::uint64_t site = 0;
    auto drop = [&](const Tensor<Real>& t) {
      ++site;
      if (!opt.train || cfg_.dropout_p <= 0) return t;
      return ops::dropout(tape, t, cfg_.dropout_p, mix64(opt.dropout_key, site));
    };
    auto tap = [&](const Tensor<Real>& t) {
      if (opt.taps) opt.taps->norm_inputs.push_back(t);
    };
    x = drop(x);
    for (const auto& b : blocks_) {
      tap(x);
      Tensor<Real> h = norm_apply(tape, cfg_.norm_kind, x, b.ln_1);
      x = ops::add(tape, x, drop(attention(tape, h, b.attn)));
      tap(x);
      h = norm_apply(tape, cfg_.norm_kind, x, b.ln_2);
      x = ops::add(tape, x, drop(ffn(tape, h, b.mlp)));
      if (opt.taps) opt.taps->block_outputs.push_back(x);
    }
    tap(x);
    x = norm_apply(tape, cfg_.norm_kind, x, ln_f_);
    if (cfg_.weight_tying) return ops::matmul_bt(tape, x, wte_);
    return ops::matmul_bt(tape, x, lm_head_);
  }

  Tensor<Real> forward(Tape<Real>& tape, std::span<const TokenId> tokens, std::size_t B, std::size_t T,
                       const ForwardOptions<Real>& opt = {}) const {
    return forward_embedded(tape, embed(tape, tokens, B, T), opt);
  }

  // Attention sublayer on normalized input h[B, T, D].
  Tensor<Real> attention(Tape<Real>& tape, const Tensor<Real>& h, const AttnParams<Real>& p) const {
    const std::size_t Hq = cfg_.n_head, Hkv = cfg_.kv_heads(), hd = cfg_.head_dim(), D = cfg_.d_model;
    const std::size_t rep = Hq / Hkv;
    const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(hd)));
    Tensor<Real> qkv = ops::linear(tape, h, p.c_attn_w, p.c_attn_b);
    Tensor<Real> q = ops::split_heads(tape, qkv, 0, Hq, hd);
    Tensor<Real> k = ops::split_heads(tape, qkv, D, Hkv, hd);
    if (cfg_.pos_kind == PosKind::rope) {
      q = ops::rope(tape, q, cfg_.rope_base);
      k = ops::rope(tape, k, cfg_.rope_base);
    }
    auto attend = [&](const Tensor<Real>& qh, const Tensor<Real>& kh) {
      return ops::causal_softmax(tape, ops::bmm(tape, qh, kh, true, inv_sqrt));
    };
    Tensor<Real> y;
    if (!cfg_.is_diff()) {
      Tensor<Real> v = ops::split_heads(tape, qkv, D + Hkv * hd, Hkv, hd);
      y = ops::bmm(tape, attend(q, ops::repeat_heads(tape, k, rep)), ops::repeat_heads(tape, v, rep));
    } else {
      Tensor<Real> v = ops::repeat_heads(tape, ops::split_heads(tape, qkv, D + Hkv * hd, Hkv / 2, 2 * hd), rep);
      Tensor<Real> p1 = attend(ops::take_heads(tape, q, 2, 0), ops::repeat_heads(tape, ops::take_heads(tape, k, 2, 0), rep));
      Tensor<Real> p2 = attend(ops::take_heads(tape, q, 2, 1), ops::repeat_heads(tape, ops::take_heads(tape, k, 2, 1), rep));
      Tensor<Real> lam = diff_override.lambda ? Tensor<Real>::scalar(static_cast<Real>(*diff_override.lambda))
                                              : lambda(tape, p);
      y = ops::sub(tape, ops::bmm(tape, p1, v), ops::scale_heads(tape, ops::bmm(tape, p2, v), lam));
      if (!diff_override.identity_stabilizer) {
        y = ops::head_rms_norm(tape, y, p.subln);
        if (cfg_.diff_lambda_init != 0) y = ops::scale(tape, y, static_cast<Real>(1 - cfg_.diff_lambda_init));
      }
    }
    return ops::linear(tape, ops::merge_heads(tape, y), p.c_proj_w, p.c_proj_b);
  }

  // diff_v1: [1] = exp(q1.k1) - exp(q2.k2) + lambda_init. diff_sigmoid: [pairs].
  Tensor<Real> lambda(Tape<Real>& tape, const AttnParams<Real>& p) const {
    if (cfg_.attn_kind == AttnKind::diff_sigmoid) return ops::sigmoid(tape, p.lambda_raw);
    Tensor<Real> a = ops::exp(tape, ops::dot(tape, p.lambda_q1, p.lambda_k1));
    Tensor<Real> b = ops::exp(tape, ops::dot(tape, p.lambda_q2, p.lambda_k2));
    return ops::affine(tape, ops::sub(tape, a, b), Real(1), static_cast<Real>(cfg_.diff_lambda_init));
  }

  Tensor<Real> ffn(Tape<Real>& tape, const Tensor<Real>& h, const FfnParams<Real>& p) const {
    Tensor<Real> a;
    if (cfg_.ffn_kind == FfnKind::gelu) {
      a = ops::gelu(tape, ops::linear(tape, h, p.c_fc_w, p.c_fc_b));
    } else {
      a = ops::mul(tape, ops::linear(tape, h, p.c_fc_w, p.c_fc_b),
                   ops::silu(tape, ops::linear(tape, h, p.c_gate_w, p.c_gate_b)));
    }
    return ops::linear(tape, a, p.c_proj_w, p.c_proj_b);
  }

  const std::vector<BlockParams<Real>>& blocks() const { return blocks_; }

 private:
  // Each parameter draws from its own stream keyed by (seed, name), so the
  // initial value of a parameter does not depend on which others exist.
  Tensor<Real> make(const std::string& name, Shape shape, double stddev, double fill, bool decay,
                    std::uint64_t seed) {
    Tensor<Real> t(std::move(shape), static_cast<Real>(fill), true);
    if (stddev > 0) {
      CounterRng rng(mix64(seed, fnv1a(name)));
      for (Real& v : t.values()) v = static_cast<Real>(stddev * rng.normal());
    }
    params_.push_back(Param<Real>{name, t, decay});
    return t;
  }

  NormParams<Real> make_norm(const std::string& prefix, std::uint64_t seed) {
    const std::size_t D = cfg_.d_model;
    NormParams<Real> n;
    n.gamma = make(prefix + ".weight", Shape{D}, 0, 1.0, false, seed);
    if (cfg_.norm_kind != NormKind::rmsnorm) n.beta = make(prefix + ".bias", Shape{D}, 0, 0.0, false, seed);
    if (cfg_.norm_kind == NormKind::dyt) n.alpha = make(prefix + ".alpha", Shape{1}, 0, cfg_.alpha_init, false, seed);
    return n;
  }

  void build(std::uint64_t seed) {
    const std::size_t D = cfg_.d_model, V = cfg_.vocab_size, L = cfg_.n_layer;
    const std::size_t hd = cfg_.head_dim(), Hq = cfg_.n_head, Hkv = cfg_.kv_heads(), F = cfg_.ffn_hidden();
    const double std0 = 0.02, std_res = 0.02 / std::sqrt(2.0 * static_cast<double>(L));
    wte_ = make("wte", Shape{V, D}, std0, 0, true, seed);
    if (cfg_.pos_kind == PosKind::learned) wpe_ = make("wpe", Shape{cfg_.block_size, D}, std0, 0, true, seed);
    const std::size_t W = Hq * hd + 2 * Hkv * hd;
    for (std::size_t l = 0; l < L; ++l) {
      const std::string pre = "h." + std::to_string(l);
      BlockParams<Real> b;
      b.ln_1 = make_norm(pre + ".ln_1", seed);
      b.attn.c_attn_w = make(pre + ".attn.c_attn.weight", Shape{D, W}, std0, 0, true, seed);
      b.attn.c_attn_b = make(pre + ".attn.c_attn.bias", Shape{W}, 0, 0, false, seed);
      b.attn.c_proj_w = make(pre + ".attn.c_proj.weight", Shape{D, D}, std_res, 0, true, seed);
      b.attn.c_proj_b = make(pre + ".attn.c_proj.bias", Shape{D}, 0, 0, false, seed);
      if (cfg_.attn_kind == AttnKind::diff_v1) {
        b.attn.lambda_q1 = make(pre + ".attn.lambda_q1", Shape{hd}, 0.1, 0, false, seed);
        b.attn.lambda_k1 = make(pre + ".attn.lambda_k1", Shape{hd}, 0.1, 0, false, seed);
        b.attn.lambda_q2 = make(pre + ".attn.lambda_q2", Shape{hd}, 0.1, 0, false, seed);
        b.attn.lambda_k2 = make(pre + ".attn.lambda_k2", Shape{hd}, 0.1, 0, false, seed);
      } else if (cfg_.attn_kind == AttnKind::diff_sigmoid) {
        b.attn.lambda_raw = make(pre + ".attn.lambda_raw", Shape{Hq / 2}, 0, 0, false, seed);
      }
      if (cfg_.is_diff()) b.attn.subln = make(pre + ".attn.subln.weight", Shape{Hq * hd}, 0, 1.0, false, seed);
      b.ln_2 = make_norm(pre + ".ln_2", seed);
      b.mlp.c_fc_w = make(pre + ".mlp.c_fc.weight", Shape{D, F}, std0, 0, true, seed);
      b.mlp.c_fc_b = make(pre + ".mlp.c_fc.bias", Shape{F}, 0, 0, false, seed);
      if (cfg_.ffn_kind == FfnKind::swiglu) {
        b.mlp.c_gate_w = make(pre + ".mlp.c_gate.weight", Shape{D, F}, std0, 0, true, seed);
        b.mlp.c_gate_b = make(pre + ".mlp.c_gate.bias", Shape{F}, 0, 0, false, seed);
      }
      b.mlp.c_proj_w = make(pre + ".mlp.c_proj.weight", Shape{F, D}, std_res, 0, true, seed);
      b.mlp.c_proj_b = make(pre + ".mlp.c_proj.bias", Shape{D}, 0, 0, false, seed);
      blocks_.push_back(std::move(b));
    }
    ln_f_ = make_norm("ln_f", seed);
    if (!cfg_.weight_tying) lm_head_ = make("lm_head.weight", Shape{V, D}, std0, 0, true, seed);
  }

  ModelConfig cfg_;
  std::vector<Param<Real>> params_;
  Tensor<Real> wte_, wpe_, lm_head_;
  std::vector<BlockParams<Real>> blocks_;
  NormParams<Real> ln_f_;
};

}  // namespace normlab
