// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "normlab/tensor.hpp"

// The closed op set. Every op computes its output, then registers a backward
// closure on the tape when any input requires a gradient. Dense products go
// through Eigen; everything else is a plain loop.
namespace normlab::ops {

using TokenId = std::uint32_t;

namespace detail {

template <class Real>
using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MapR = Eigen::Map<MatR<Real>>;
template <class Real>
using CMapR = Eigen::Map<const MatR<Real>>;

template <class Real>
using ArrR = Eigen::Array<Real, Eigen::Dynamic, 1>;
template <class Real>
Eigen::Map<ArrR<Real>> vec(Real* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}
template <class Real>
Eigen::Map<const ArrR<Real>> cvec(const Real* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// b broadcasts onto a when b's shape is a suffix of a's shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <class Real>
void check_broadcast(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  require(is_suffix(a.shape(), b.shape()),
          std::string(op) + ": cannot broadcast " + to_string(b.shape()) + " onto " + to_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products

// a[..., k] x b[k, n] -> [..., n]; leading dims of a are flattened into rows.
template <class Real>
Tensor<Real> matmul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  using namespace detail;
  require(a.defined() && b.defined() && a.rank() >= 2 && b.rank() == 2 && a.shape().back() == b.dim(0),
          "matmul: shape mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const auto k = static_cast<Eigen::Index>(b.dim(0));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  const auto m = static_cast<Eigen::Index>(a.size()) / k;
  Shape os = a.shape();
  os.back() = b.dim(1);
  auto out = Tensor<Real>::empty(os);
  MapR<Real>(out.data(), m, n).noalias() = CMapR<Real>(a.data(), m, k) * CMapR<Real>(b.data(), k, n);
  return tape.record("matmul", out, tape.wants_grad({&a, &b}), [a, b, out, m, k, n]() mutable {
    CMapR<Real> g(out.grad().data(), m, n);
    if (a.requires_grad())
      MapR<Real>(a.grad().data(), m, k).noalias() += g * CMapR<Real>(b.data(), k, n).transpose();
    if (b.requires_grad())
      MapR<Real>(b.grad().data(), k, n).noalias() += CMapR<Real>(a.data(), m, k).transpose() * g;
  });
}

// a[..., k] x b[n, k]^T -> [..., n]. Used by the tied output head.
template <class Real>
Tensor<Real> matmul_bt(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  using namespace detail;
  require(a.defined() && b.defined() && a.rank() >= 2 && b.rank() == 2 && a.shape().back() == b.dim(1),
          "matmul_bt: shape mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  const auto k = static_cast<Eigen::Index>(b.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(0));
  const auto m = static_cast<Eigen::Index>(a.size()) / k;
  Shape os = a.shape();
  os.back() = b.dim(0);
  auto out = Tensor<Real>::empty(os);
  MapR<Real>(out.data(), m, n).noalias() = CMapR<Real>(a.data(), m, k) * CMapR<Real>(b.data(), n, k).transpose();
  return tape.record("matmul_bt", out, tape.wants_grad({&a, &b}), [a, b, out, m, k, n]() mutable {
    CMapR<Real> g(out.grad().data(), m, n);
    if (a.requires_grad()) MapR<Real>(a.grad().data(), m, k).noalias() += g * CMapR<Real>(b.data(), n, k);
    if (b.requires_grad())
      MapR<Real>(b.grad().data(), n, k).noalias() += g.transpose() * CMapR<Real>(a.data(), m, k);
  });
}

// x[..., k] W[k, n] + b[n]; b may be undefined.
template <class Real>
Tensor<Real> linear(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  using namespace detail;
  require(x.defined() && w.defined() && x.rank() >= 2 && w.rank() == 2 && x.shape().back() == w.dim(0),
          "linear: shape mismatch " + to_string(x.shape()) + " x " + to_string(w.shape()));
  require(!b.defined() || (b.rank() == 1 && b.dim(0) == w.dim(1)),
          "linear: bias " + (b.defined() ? to_string(b.shape()) : std::string()) + " does not fit " + to_string(w.shape()));
  const auto k = static_cast<Eigen::Index>(w.dim(0));
  const auto n = static_cast<Eigen::Index>(w.dim(1));
  const auto m = static_cast<Eigen::Index>(x.size()) / k;
  Shape os = x.shape();
  os.back() = static_cast<std::size_t>(n);
  auto out = Tensor<Real>::empty(os);
  MapR<Real> O(out.data(), m, n);
  O.noalias() = CMapR<Real>(x.data(), m, k) * CMapR<Real>(w.data(), k, n);
  if (b.defined()) O.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b.data(), n);
  return tape.record("linear", out, tape.wants_grad({&x, &w, &b}), [x, w, b, out, m, k, n]() mutable {
    CMapR<Real> G(out.grad().data(), m, n);
    if (x.requires_grad()) MapR<Real>(x.grad().data(), m, k).noalias() += G * CMapR<Real>(w.data(), k, n).transpose();
    if (w.requires_grad()) MapR<Real>(w.grad().data(), k, n).noalias() += CMapR<Real>(x.data(), m, k).transpose() * G;
    if (b.defined() && b.requires_grad())
      Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b.grad().data(), n) += G.colwise().sum();
  });
}

// Batched product over matching leading dims: alpha * a[..., m, k] x b[..., k, n],
// or b[..., n, k] when transpose_b is set.
template <class Real>
Tensor<Real> bmm(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_b = false,
                 Real alpha = Real(1)) {
  using namespace detail;
  const bool ranks_ok = a.defined() && b.defined() && a.rank() >= 3 && a.rank() == b.rank() &&
                        std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  const std::size_t r = ranks_ok ? a.rank() : 0;
  const bool inner_ok = ranks_ok && a.dim(r - 1) == (transpose_b ? b.dim(r - 1) : b.dim(r - 2));
  require(inner_ok, "bmm: shape mismatch " + (a.defined() ? to_string(a.shape()) : "?") + " x " +
                        (b.defined() ? to_string(b.shape()) : "?") + (transpose_b ? "^T" : ""));
  const auto m = static_cast<Eigen::Index>(a.dim(r - 2));
  const auto k = static_cast<Eigen::Index>(a.dim(r - 1));
  const auto n = static_cast<Eigen::Index>(transpose_b ? b.dim(r - 2) : b.dim(r - 1));
  const std::size_t groups = a.size() / static_cast<std::size_t>(m * k);
  Shape os = a.shape();
  os[r - 1] = static_cast<std::size_t>(n);
  auto out = Tensor<Real>::empty(os);
  const std::size_t sa = static_cast<std::size_t>(m * k), sb = static_cast<std::size_t>(k * n),
                    so = static_cast<std::size_t>(m * n);
  for (std::size_t g = 0; g < groups; ++g) {
    CMapR<Real> A(a.data() + g * sa, m, k);
    MapR<Real> O(out.data() + g * so, m, n);
    if (transpose_b)
      O.noalias() = alpha * (A * CMapR<Real>(b.data() + g * sb, n, k).transpose());
    else
      O.noalias() = alpha * (A * CMapR<Real>(b.data() + g * sb, k, n));
  }
  return tape.record("bmm", out, tape.wants_grad({&a, &b}),
                     [a, b, out, m, k, n, groups, sa, sb, so, transpose_b, alpha]() mutable {
                       const Real* gp = out.grad().data();
                       Real* ga = a.requires_grad() ? a.grad().data() : nullptr;
                       Real* gb = b.requires_grad() ? b.grad().data() : nullptr;
                       for (std::size_t g = 0; g < groups; ++g) {
                         CMapR<Real> G(gp + g * so, m, n);
                         CMapR<Real> A(a.data() + g * sa, m, k);
                         if (transpose_b) {
                           CMapR<Real> Bm(b.data() + g * sb, n, k);
                           if (ga) MapR<Real>(ga + g * sa, m, k).noalias() += alpha * (G * Bm);
                           if (gb) MapR<Real>(gb + g * sb, n, k).noalias() += alpha * (G.transpose() * A);
                         } else {
                           CMapR<Real> Bm(b.data() + g * sb, k, n);
                           if (ga) MapR<Real>(ga + g * sa, m, k).noalias() += alpha * (G * Bm.transpose());
                           if (gb) MapR<Real>(gb + g * sb, k, n).noalias() += alpha * (A.transpose() * G);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (b may broadcast as a shape suffix of a)

template <class Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_broadcast("add", a, b);
  auto out = Tensor<Real>::empty(a.shape());
  const std::size_t n = a.size(), nb = b.size();
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < n; i += nb)
    for (std::size_t j = 0; j < nb; ++j) po[i + j] = pa[i + j] + pb[j];
  return tape.record("add", out, tape.wants_grad({&a, &b}), [a, b, out, n, nb]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j];
    }
  });
}

template <class Real>
Tensor<Real> sub(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_broadcast("sub", a, b);
  auto out = Tensor<Real>::empty(a.shape());
  const std::size_t n = a.size(), nb = b.size();
  for (std::size_t i = 0; i < n; i += nb)
    for (std::size_t j = 0; j < nb; ++j) out.data()[i + j] = a.data()[i + j] - b.data()[j];
  return tape.record("sub", out, tape.wants_grad({&a, &b}), [a, b, out, n, nb]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) gb[j] -= g[i + j];
    }
  });
}

template <class Real>
Tensor<Real> mul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_broadcast("mul", a, b);
  auto out = Tensor<Real>::empty(a.shape());
  const std::size_t n = a.size(), nb = b.size();
  for (std::size_t i = 0; i < n; i += nb)
    for (std::size_t j = 0; j < nb; ++j) out.data()[i + j] = a.data()[i + j] * b.data()[j];
  return tape.record("mul", out, tape.wants_grad({&a, &b}), [a, b, out, n, nb]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) ga[i + j] += g[i + j] * b.data()[j];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j] * a.data()[i + j];
    }
  });
}

// y = c * x + shift, constants.
template <class Real>
Tensor<Real> affine(Tape<Real>& tape, const Tensor<Real>& x, Real c, Real shift = Real(0)) {
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = c * x.data()[i] + shift;
  return tape.record("affine", out, tape.wants_grad({&x}), [x, out, c]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * g[i];
  });
}

template <class Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& x, Real c) {
  return affine(tape, x, c);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <class Real, class F, class DF>
Tensor<Real> unary(Tape<Real>& tape, const char* name, const Tensor<Real>& x, F f, DF df) {
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = f(x.data()[i]);
  return tape.record(name, out, tape.wants_grad({&x}), [x, out, df]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    const Real* px = x.data();
    const Real* py = out.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(px[i], py[i]);
  });
}

template <class Real>
Real sigmoid(Real x) {
  return x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
}

}  // namespace detail

template <class Real>
Real gelu_value(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.7071067811865476)));
}

template <class Real>
Real silu_value(Real x) {
  return x * detail::sigmoid(x);
}

// Exact (erf) GELU; the normal CDF is kept for the backward pass.
template <class Real>
Tensor<Real> gelu(Tape<Real>& tape, const Tensor<Real>& x) {
  using namespace detail;
  const std::size_t n = x.size();
  auto cdf = Tensor<Real>::empty(x.shape()), out = Tensor<Real>::empty(x.shape());
  auto X = cvec(x.data(), n);
  vec(cdf.data(), n) = Real(0.5) * ((X * Real(0.7071067811865476)).erf() + Real(1));
  vec(out.data(), n) = X * cvec(cdf.data(), n);
  return tape.record("gelu", out, tape.wants_grad({&x}), [x, out, cdf, n]() mutable {
    auto X = cvec(x.data(), n);
    auto pdf = (Real(-0.5) * X.square()).exp() * Real(0.3989422804014327);
    vec(x.grad().data(), n) += cvec(out.grad().data(), n) * (cvec(cdf.data(), n) + X * pdf);
  });
}

template <class Real>
Tensor<Real> silu(Tape<Real>& tape, const Tensor<Real>& x) {
  using namespace detail;
  const std::size_t n = x.size();
  auto sig = Tensor<Real>::empty(x.shape()), out = Tensor<Real>::empty(x.shape());
  auto X = cvec(x.data(), n);
  vec(sig.data(), n) = ((-X).exp() + Real(1)).inverse();
  vec(out.data(), n) = X * cvec(sig.data(), n);
  return tape.record("silu", out, tape.wants_grad({&x}), [x, out, sig, n]() mutable {
    auto X = cvec(x.data(), n);
    auto S = cvec(sig.data(), n);
    vec(x.grad().data(), n) += cvec(out.grad().data(), n) * S * (Real(1) + X * (Real(1) - S));
  });
}

template <class Real>
Tensor<Real> sigmoid(Tape<Real>& tape, const Tensor<Real>& x) {
  return detail::unary(
      tape, "sigmoid", x, [](Real v) { return detail::sigmoid(v); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> exp(Tape<Real>& tape, const Tensor<Real>& x) {
  return detail::unary(
      tape, "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> tanh(Tape<Real>& tape, const Tensor<Real>& x) {
  return detail::unary(
      tape, "tanh", x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real(1) - y * y; });
}

// Inverted dropout; mask bits come from a counter-based stream keyed by `key`.
template <class Real>
Tensor<Real> dropout(Tape<Real>& tape, const Tensor<Real>& x, double p, std::uint64_t key) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  auto mask = Tensor<Real>::empty(Shape{x.size()});
  CounterRng rng(key);
  const Real keep_scale = Real(1.0 / (1.0 - p));
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask.data()[i] = rng.uniform() >= p ? keep_scale : Real(0);
    out.data()[i] = x.data()[i] * mask.data()[i];
  }
  return tape.record("dropout", out, tape.wants_grad({&x}), [x, out, mask]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask.data()[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;
  Tensor<Real> out = Tensor<Real>::scalar(s);
  return tape.record("sum", out, tape.wants_grad({&x}), [x, out]() mutable {
    const Real g = out.grad()[0];
    for (Real& gx : x.grad()) gx += g;
  });
}

template <class Real>
Tensor<Real> mean(Tape<Real>& tape, const Tensor<Real>& x) {
  return scale(tape, sum(tape, x), Real(1) / static_cast<Real>(x.size()));
}

// <a, b> over all entries -> [1]
template <class Real>
Tensor<Real> dot(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require(a.shape() == b.shape(), "dot: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  Tensor<Real> out = Tensor<Real>::scalar(s);
  return tape.record("dot", out, tape.wants_grad({&a, &b}), [a, b, out]() mutable {
    const Real g = out.grad()[0];
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * b.data()[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * a.data()[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Embedding gather

// Rows of table[V, D] selected by ids; output shape is lead_shape + [D].
template <class Real>
Tensor<Real> gather_rows(Tape<Real>& tape, const Tensor<Real>& table, std::span<const TokenId> ids,
                         Shape lead_shape) {
  detail::require(table.rank() == 2, "gather_rows: table must be 2-D, got " + to_string(table.shape()));
  detail::require(numel(lead_shape) == ids.size(), "gather_rows: id count does not match " + to_string(lead_shape));
  const std::size_t V = table.dim(0), D = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V)
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " out of range for " + std::to_string(V) + " rows");
  }
  Shape os = std::move(lead_shape);
  os.push_back(D);
  auto out = Tensor<Real>::empty(os);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + ids[i] * D, D, out.data() + i * D);
  auto idv = std::make_shared<std::vector<TokenId>>(ids.begin(), ids.end());
  return tape.record("gather_rows", out, tape.wants_grad({&table}), [table, out, idv, D]() mutable {
    auto g = out.grad();
    auto gt = table.grad();
    for (std::size_t i = 0; i < idv->size(); ++i)
      for (std::size_t j = 0; j < D; ++j) gt[(*idv)[i] * D + j] += g[i * D + j];
  });
}

// ---------------------------------------------------------------------------
// Softmax

namespace detail {

template <class Real>
void softmax_row(const Real* x, Real* y, std::size_t n) {
  auto X = cvec(x, n);
  auto Y = vec(y, n);
  Y = (X - X.maxCoeff()).exp();
  Y *= Real(1) / Y.sum();
}

template <class Real>
void softmax_row_backward(const Real* y, const Real* g, Real* gx, std::size_t n) {
  Real dotv = 0;
  for (std::size_t j = 0; j < n; ++j) dotv += g[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dotv);
}

}  // namespace detail

// Softmax over the last dimension, max-subtracted per row.
template <class Real>
Tensor<Real> softmax_rows(Tape<Real>& tape, const Tensor<Real>& x) {
  detail::require(x.rank() >= 1 && x.shape().back() >= 1, "softmax_rows: last dimension must be >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(x.data() + r * n, out.data() + r * n, n);
  return tape.record("softmax_rows", out, tape.wants_grad({&x}), [x, out, n, rows]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r)
      detail::softmax_row_backward(out.data() + r * n, g.data() + r * n, gx.data() + r * n, n);
  });
}

// Causal softmax over x[..., T, T]: row i is normalized over keys j <= i and
// masked entries are exactly zero.
template <class Real>
Tensor<Real> causal_softmax(Tape<Real>& tape, const Tensor<Real>& x) {
  detail::require(x.rank() >= 2 && x.dim(x.rank() - 1) == x.dim(x.rank() - 2),
                  "causal_softmax: expects [..., T, T], got " + to_string(x.shape()));
  const std::size_t T = x.shape().back();
  const std::size_t blocks = x.size() / (T * T);
  Tensor<Real> out(x.shape());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < T; ++i) {
      const std::size_t off = b * T * T + i * T;
      detail::softmax_row(x.data() + off, out.data() + off, i + 1);
    }
  return tape.record("causal_softmax", out, tape.wants_grad({&x}), [x, out, T, blocks]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t i = 0; i < T; ++i) {
        const std::size_t off = b * T * T + i * T;
        detail::softmax_row_backward(out.data() + off, g.data() + off, gx.data() + off, i + 1);
      }
  });
}

// ---------------------------------------------------------------------------
// Head layout

// Columns [offset, offset + heads*head_dim) of x[B, T, W] viewed as heads,
// returned as [B, heads, T, head_dim].
template <class Real>
Tensor<Real> split_heads(Tape<Real>& tape, const Tensor<Real>& x, std::size_t offset, std::size_t heads,
                         std::size_t head_dim) {
  detail::require(x.rank() == 3 && offset + heads * head_dim <= x.dim(2),
                  "split_heads: cannot take " + std::to_string(heads) + "x" + std::to_string(head_dim) +
                      " columns at " + std::to_string(offset) + " from " + to_string(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), W = x.dim(2);
  auto out = Tensor<Real>::empty(Shape{B, heads, T, head_dim});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(x.data() + (b * T + t) * W + offset + h * head_dim, head_dim,
                    out.data() + ((b * heads + h) * T + t) * head_dim);
  return tape.record("split_heads", out, tape.wants_grad({&x}),
                     [x, out, B, T, W, offset, heads, head_dim]() mutable {
                       auto g = out.grad();
                       auto gx = x.grad();
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t h = 0; h < heads; ++h)
                           for (std::size_t t = 0; t < T; ++t) {
                             const Real* src = g.data() + ((b * heads + h) * T + t) * head_dim;
                             Real* dst = gx.data() + (b * T + t) * W + offset + h * head_dim;
                             for (std::size_t j = 0; j < head_dim; ++j) dst[j] += src[j];
                           }
                     });
}

// [B, H, T, d] -> [B, T, H*d]
template <class Real>
Tensor<Real> merge_heads(Tape<Real>& tape, const Tensor<Real>& x) {
  detail::require(x.rank() == 4, "merge_heads: expects [B, H, T, d], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), T = x.dim(2), d = x.dim(3);
  auto out = Tensor<Real>::empty(Shape{B, T, H * d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(x.data() + ((b * H + h) * T + t) * d, d, out.data() + (b * T + t) * H * d + h * d);
  return tape.record("merge_heads", out, tape.wants_grad({&x}), [x, out, B, H, T, d]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t) {
          const Real* src = g.data() + (b * T + t) * H * d + h * d;
          Real* dst = gx.data() + ((b * H + h) * T + t) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
  });
}

// Heads offset, offset+stride, ... of x[B, H, T, d].
template <class Real>
Tensor<Real> take_heads(Tape<Real>& tape, const Tensor<Real>& x, std::size_t stride, std::size_t offset) {
  detail::require(x.rank() == 4 && stride > 0 && offset < stride && x.dim(1) % stride == 0,
                  "take_heads: bad stride/offset for " + to_string(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), Ho = H / stride, span = x.dim(2) * x.dim(3);
  auto out = Tensor<Real>::empty(Shape{B, Ho, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < Ho; ++h)
      std::copy_n(x.data() + (b * H + h * stride + offset) * span, span, out.data() + (b * Ho + h) * span);
  return tape.record("take_heads", out, tape.wants_grad({&x}), [x, out, B, H, Ho, span, stride, offset]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < Ho; ++h) {
        const Real* src = g.data() + (b * Ho + h) * span;
        Real* dst = gx.data() + (b * H + h * stride + offset) * span;
        for (std::size_t j = 0; j < span; ++j) dst[j] += src[j];
      }
  });
}

// Grouped-query sharing: output head h reads input head h / rep.
template <class Real>
Tensor<Real> repeat_heads(Tape<Real>& tape, const Tensor<Real>& x, std::size_t rep) {
  detail::require(x.rank() == 4 && rep >= 1, "repeat_heads: expects [B, H, T, d], got " + to_string(x.shape()));
  if (rep == 1) return x;
  const std::size_t B = x.dim(0), H = x.dim(1), span = x.dim(2) * x.dim(3);
  auto out = Tensor<Real>::empty(Shape{B, H * rep, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H * rep; ++h)
      std::copy_n(x.data() + (b * H + h / rep) * span, span, out.data() + (b * H * rep + h) * span);
  return tape.record("repeat_heads", out, tape.wants_grad({&x}), [x, out, B, H, rep, span]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H * rep; ++h) {
        const Real* src = g.data() + (b * H * rep + h) * span;
        Real* dst = gx.data() + (b * H + h / rep) * span;
        for (std::size_t j = 0; j < span; ++j) dst[j] += src[j];
      }
  });
}

// Multiplies head h of x[B, H, T, d] by s[h] (or by s[0] when s has one entry).
template <class Real>
Tensor<Real> scale_heads(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& s) {
  detail::require(x.rank() == 4 && (s.size() == 1 || s.size() == x.dim(1)),
                  "scale_heads: scale " + to_string(s.shape()) + " does not fit " + to_string(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), span = x.dim(2) * x.dim(3);
  const bool shared = s.size() == 1;
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      const Real c = s.data()[shared ? 0 : h];
      const std::size_t off = (b * H + h) * span;
      for (std::size_t j = 0; j < span; ++j) out.data()[off + j] = c * x.data()[off + j];
    }
  return tape.record("scale_heads", out, tape.wants_grad({&x, &s}), [x, s, out, B, H, span, shared]() mutable {
    auto g = out.grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = (b * H + h) * span;
        const std::size_t si = shared ? 0 : h;
        if (x.requires_grad()) {
          auto gx = x.grad();
          const Real c = s.data()[si];
          for (std::size_t j = 0; j < span; ++j) gx[off + j] += c * g[off + j];
        }
        if (s.requires_grad()) {
          Real acc = 0;
          for (std::size_t j = 0; j < span; ++j) acc += g[off + j] * x.data()[off + j];
          s.grad()[si] += acc;
        }
      }
  });
}

// Rotary embedding on x[B, H, T, d]: pairs (2i, 2i+1) at position t rotate by
// t * base^(-2i/d).
template <class Real>
Tensor<Real> rope(Tape<Real>& tape, const Tensor<Real>& x, double base = 10000.0) {
  detail::require(x.rank() == 4, "rope: expects [B, H, T, d], got " + to_string(x.shape()));
  const std::size_t d = x.dim(3);
  if (d % 2 != 0) throw ConfigError("rope: head_dim must be even, got " + std::to_string(d));
  const std::size_t BH = x.dim(0) * x.dim(1), T = x.dim(2), half = d / 2;
  auto cs = Tensor<Real>::empty(Shape{T * half * 2});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      cs.data()[(t * half + i) * 2] = static_cast<Real>(std::cos(theta));
      cs.data()[(t * half + i) * 2 + 1] = static_cast<Real>(std::sin(theta));
    }
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t g = 0; g < BH; ++g)
    for (std::size_t t = 0; t < T; ++t) {
      const Real* px = x.data() + (g * T + t) * d;
      Real* po = out.data() + (g * T + t) * d;
      for (std::size_t i = 0; i < half; ++i) {
        const Real c = cs.data()[(t * half + i) * 2], s = cs.data()[(t * half + i) * 2 + 1];
        po[2 * i] = px[2 * i] * c - px[2 * i + 1] * s;
        po[2 * i + 1] = px[2 * i] * s + px[2 * i + 1] * c;
      }
    }
  return tape.record("rope", out, tape.wants_grad({&x}), [x, out, cs, BH, T, d, half]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t gi = 0; gi < BH; ++gi)
      for (std::size_t t = 0; t < T; ++t) {
        const Real* pg = g.data() + (gi * T + t) * d;
        Real* px = gx.data() + (gi * T + t) * d;
        for (std::size_t i = 0; i < half; ++i) {
          const Real c = cs.data()[(t * half + i) * 2], s = cs.data()[(t * half + i) * 2 + 1];
          px[2 * i] += pg[2 * i] * c + pg[2 * i + 1] * s;
          px[2 * i + 1] += -pg[2 * i] * s + pg[2 * i + 1] * c;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Norm kernels (all act on the last dimension D)

namespace detail {

template <class Real>
void require_vec(const char* op, const Tensor<Real>& p, std::size_t D, const char* name) {
  require(p.defined() && p.size() == D,
          std::string(op) + ": " + name + " must have " + std::to_string(D) + " entries" +
              (p.defined() ? ", got " + to_string(p.shape()) : ", got none"));
}

}  // namespace detail

template <class Real>
Tensor<Real> layer_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
  const std::size_t D = x.shape().back(), rows = x.size() / D;
  detail::require_vec("layer_norm", gamma, D, "gamma");
  detail::require_vec("layer_norm", beta, D, "beta");
  auto xhat = Tensor<Real>::empty(Shape{x.size()});
  auto rstd = Tensor<Real>::empty(Shape{rows});
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* px = x.data() + r * D;
    Real mu = 0;
    for (std::size_t j = 0; j < D; ++j) mu += px[j];
    mu /= static_cast<Real>(D);
    Real var = 0;
    for (std::size_t j = 0; j < D; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= static_cast<Real>(D);
    const Real rs = Real(1) / std::sqrt(var + eps);
    rstd.data()[r] = rs;
    for (std::size_t j = 0; j < D; ++j) {
      const Real xh = (px[j] - mu) * rs;
      xhat.data()[r * D + j] = xh;
      out.data()[r * D + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  return tape.record("layer_norm", out, tape.wants_grad({&x, &gamma, &beta}),
                     [x, gamma, beta, out, xhat, rstd, D, rows]() mutable {
                       auto g = out.grad();
                       Real* gx = x.requires_grad() ? x.grad().data() : nullptr;
                       Real* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
                       Real* gb = beta.requires_grad() ? beta.grad().data() : nullptr;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const Real* pg = g.data() + r * D;
                         const Real* xh = xhat.data() + r * D;
                         Real m1 = 0, m2 = 0;
                         for (std::size_t j = 0; j < D; ++j) {
                           const Real gxh = pg[j] * gamma.data()[j];
                           m1 += gxh;
                           m2 += gxh * xh[j];
                           if (gg) gg[j] += pg[j] * xh[j];
                           if (gb) gb[j] += pg[j];
                         }
                         if (!gx) continue;
                         m1 /= static_cast<Real>(D);
                         m2 /= static_cast<Real>(D);
                         const Real rs = rstd.data()[r];
                         for (std::size_t j = 0; j < D; ++j)
                           gx[r * D + j] += rs * (pg[j] * gamma.data()[j] - m1 - xh[j] * m2);
                       }
                     });
}

template <class Real>
Tensor<Real> rms_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gamma, Real eps = Real(1e-5)) {
  const std::size_t D = x.shape().back(), rows = x.size() / D;
  detail::require_vec("rms_norm", gamma, D, "gamma");
  auto rinv = Tensor<Real>::empty(Shape{rows});
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* px = x.data() + r * D;
    Real ms = 0;
    for (std::size_t j = 0; j < D; ++j) ms += px[j] * px[j];
    const Real ri = Real(1) / std::sqrt(ms / static_cast<Real>(D) + eps);
    rinv.data()[r] = ri;
    for (std::size_t j = 0; j < D; ++j) out.data()[r * D + j] = gamma.data()[j] * px[j] * ri;
  }
  return tape.record("rms_norm", out, tape.wants_grad({&x, &gamma}), [x, gamma, out, rinv, D, rows]() mutable {
    auto g = out.grad();
    Real* gx = x.requires_grad() ? x.grad().data() : nullptr;
    Real* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* pg = g.data() + r * D;
      const Real* px = x.data() + r * D;
      const Real ri = rinv.data()[r];
      Real m = 0;
      for (std::size_t j = 0; j < D; ++j) {
        const Real n = px[j] * ri;
        if (gg) gg[j] += pg[j] * n;
        m += pg[j] * gamma.data()[j] * n;
      }
      if (!gx) continue;
      m /= static_cast<Real>(D);
      for (std::size_t j = 0; j < D; ++j) gx[r * D + j] += ri * (pg[j] * gamma.data()[j] - px[j] * ri * m);
    }
  });
}

// Dynamic tanh: gamma * tanh(alpha * x) + beta, alpha a learnable scalar.
template <class Real>
Tensor<Real> dyt(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& alpha, const Tensor<Real>& gamma,
                 const Tensor<Real>& beta) {
  const std::size_t D = x.shape().back(), rows = x.size() / D;
  detail::require_vec("dyt", alpha, 1, "alpha");
  detail::require_vec("dyt", gamma, D, "gamma");
  detail::require_vec("dyt", beta, D, "beta");
  const Real a = alpha.data()[0];
  auto th = Tensor<Real>::empty(Shape{x.size()});
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < D; ++j) {
      const std::size_t i = r * D + j;
      th.data()[i] = std::tanh(a * x.data()[i]);
      out.data()[i] = gamma.data()[j] * th.data()[i] + beta.data()[j];
    }
  return tape.record("dyt", out, tape.wants_grad({&x, &alpha, &gamma, &beta}),
                     [x, alpha, gamma, beta, out, th, D, rows, a]() mutable {
                       auto g = out.grad();
                       Real* gx = x.requires_grad() ? x.grad().data() : nullptr;
                       Real* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
                       Real* gb = beta.requires_grad() ? beta.grad().data() : nullptr;
                       Real ga = 0;
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < D; ++j) {
                           const std::size_t i = r * D + j;
                           const Real t = th.data()[i];
                           const Real d = g[i] * gamma.data()[j] * (Real(1) - t * t);
                           if (gx) gx[i] += d * a;
                           ga += d * x.data()[i];
                           if (gg) gg[j] += g[i] * t;
                           if (gb) gb[j] += g[i];
                         }
                       if (alpha.requires_grad()) alpha.grad()[0] += ga;
                     });
}

// Hard clip to [-1, 1] followed by the same affine as DyT (no alpha).
template <class Real>
Tensor<Real> hardtanh_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gamma,
                           const Tensor<Real>& beta) {
  const std::size_t D = x.shape().back(), rows = x.size() / D;
  detail::require_vec("hardtanh_norm", gamma, D, "gamma");
  detail::require_vec("hardtanh_norm", beta, D, "beta");
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < D; ++j) {
      const std::size_t i = r * D + j;
      out.data()[i] = gamma.data()[j] * std::clamp(x.data()[i], Real(-1), Real(1)) + beta.data()[j];
    }
  return tape.record("hardtanh_norm", out, tape.wants_grad({&x, &gamma, &beta}),
                     [x, gamma, beta, out, D, rows]() mutable {
                       auto g = out.grad();
                       Real* gx = x.requires_grad() ? x.grad().data() : nullptr;
                       Real* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
                       Real* gb = beta.requires_grad() ? beta.grad().data() : nullptr;
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < D; ++j) {
                           const std::size_t i = r * D + j;
                           const Real xv = x.data()[i];
                           if (gx && xv > Real(-1) && xv < Real(1)) gx[i] += g[i] * gamma.data()[j];
                           if (gg) gg[j] += g[i] * std::clamp(xv, Real(-1), Real(1));
                           if (gb) gb[j] += g[i];
                         }
                     });
}

// Per-head RMS normalization of x[B, H, T, d] with a gain of H*d entries
// (one group per head).
template <class Real>
Tensor<Real> head_rms_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gain, Real eps = Real(1e-5)) {
  detail::require(x.rank() == 4, "head_rms_norm: expects [B, H, T, d], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), T = x.dim(2), d = x.dim(3);
  detail::require_vec("head_rms_norm", gain, H * d, "gain");
  auto rinv = Tensor<Real>::empty(Shape{B * H * T});
  auto out = Tensor<Real>::empty(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t row = (b * H + h) * T + t;
        const Real* px = x.data() + row * d;
        Real ms = 0;
        for (std::size_t j = 0; j < d; ++j) ms += px[j] * px[j];
        const Real ri = Real(1) / std::sqrt(ms / static_cast<Real>(d) + eps);
        rinv.data()[row] = ri;
        for (std::size_t j = 0; j < d; ++j) out.data()[row * d + j] = gain.data()[h * d + j] * px[j] * ri;
      }
  return tape.record("head_rms_norm", out, tape.wants_grad({&x, &gain}),
                     [x, gain, out, rinv, B, H, T, d]() mutable {
                       auto g = out.grad();
                       Real* gx = x.requires_grad() ? x.grad().data() : nullptr;
                       Real* gg = gain.requires_grad() ? gain.grad().data() : nullptr;
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t h = 0; h < H; ++h)
                           for (std::size_t t = 0; t < T; ++t) {
                             const std::size_t row = (b * H + h) * T + t;
                             const Real* pg = g.data() + row * d;
                             const Real* px = x.data() + row * d;
                             const Real* w = gain.data() + h * d;
                             const Real ri = rinv.data()[row];
                             Real m = 0;
                             for (std::size_t j = 0; j < d; ++j) {
                               if (gg) gg[h * d + j] += pg[j] * px[j] * ri;
                               m += pg[j] * w[j] * px[j] * ri;
                             }
                             if (!gx) continue;
                             m /= static_cast<Real>(d);
                             for (std::size_t j = 0; j < d; ++j)
                               gx[row * d + j] += ri * (pg[j] * w[j] - px[j] * ri * m);
                           }
                     });
}

// ---------------------------------------------------------------------------
// Loss

// Mean negative log-likelihood of targets under softmax(logits) over the last
// dimension; one target per row.
template <class Real>
Tensor<Real> cross_entropy(Tape<Real>& tape, const Tensor<Real>& logits, std::span<const TokenId> targets) {
  const std::size_t V = logits.shape().back(), rows = logits.size() / V;
  detail::require(rows == targets.size(), "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                              std::to_string(rows) + " rows of " + to_string(logits.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= V)
      throw ShapeError("cross_entropy: target id " + std::to_string(targets[r]) + " at row " + std::to_string(r) +
                       " is out of range for vocab " + std::to_string(V));
  }
  auto probs = Tensor<Real>::empty(Shape{logits.size()});
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* px = logits.data() + r * V;
    Real* pp = probs.data() + r * V;
    Real mx = px[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, px[j]);
    Real s = 0;
    for (std::size_t j = 0; j < V; ++j) {
      pp[j] = std::exp(px[j] - mx);
      s += pp[j];
    }
    for (std::size_t j = 0; j < V; ++j) pp[j] /= s;
    total += static_cast<double>(std::log(s) + mx - px[targets[r]]);
  }
  Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(total / static_cast<double>(rows)));
  auto tg = std::make_shared<std::vector<TokenId>>(targets.begin(), targets.end());
  return tape.record("cross_entropy", out, tape.wants_grad({&logits}), [logits, out, probs, tg, V, rows]() mutable {
    const Real g = out.grad()[0] / static_cast<Real>(rows);
    auto gx = logits.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* pp = probs.data() + r * V;
      Real* px = gx.data() + r * V;
      for (std::size_t j = 0; j < V; ++j) px[j] += g * pp[j];
      px[(*tg)[r]] -= g;
    }
  });
}

}  // namespace normlab::ops
