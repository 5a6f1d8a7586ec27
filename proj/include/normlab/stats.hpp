// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "normlab/core.hpp"

namespace normlab::stats {

struct MeanStd {
  double mean = 0;
  double std = 0;
  std::size_t n = 0;
  bool std_defined = false;
};

// ddof = 1 gives the sample std, ddof = 0 the population std.
inline MeanStd mean_std(std::span<const double> v, int ddof = 1) {
  MeanStd r;
  r.n = v.size();
  if (v.empty()) throw ConfigError("mean_std: no values");
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (static_cast<long>(v.size()) - ddof < 1) return r;
  double ss = 0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(static_cast<long>(v.size()) - ddof));
  r.std_defined = true;
  return r;
}

inline double delta_percent(double baseline, double modified) {
  if (baseline == 0) throw ConfigError("delta_percent: zero baseline");
  return 100.0 * (modified - baseline) / baseline;
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-15;
  double c = 1, d = 1 - (a + b) * x / (a + 1);
  if (std::fabs(d) < tiny) d = tiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1) * (a + m2));
    d = 1 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1));
    d = 1 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1) < eps) return h;
  }
  throw Error("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw ConfigError("incomplete_beta: a and b must be positive");
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1) / (a + b + 2)) return std::exp(lbt) * detail::beta_cf(a, b, x) / a;
  return 1 - std::exp(lbt) * detail::beta_cf(b, a, 1 - x) / b;
}

// Student t CDF with df degrees of freedom.
inline double t_cdf(double t, double df) {
  if (!(df > 0)) throw ConfigError("t_cdf: df must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(df / 2, 0.5, df / (df + t * t));
  return t > 0 ? 1 - tail : tail;
}

// Two-sided p-value for |T| >= |t|.
inline double t_two_sided(double t, double df) {
  if (std::isinf(t)) return 0;
  return incomplete_beta(df / 2, 0.5, df / (df + t * t));
}

struct PairedSample {
  std::vector<double> a, b;
  std::vector<std::string> seeds;

  // Aligns two seed-keyed maps; every seed must be present in both.
  static PairedSample align(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
    PairedSample s;
    for (const auto& [seed, va] : a) {
      auto it = b.find(seed);
      if (it == b.end()) throw ConfigError("paired sample: seed " + seed + " missing from condition B");
      s.seeds.push_back(seed);
      s.a.push_back(va);
      s.b.push_back(it->second);
    }
    if (a.size() != b.size()) throw ConfigError("paired sample: condition B has seeds absent from A");
    return s;
  }

  void validate() const {
    if (a.size() != b.size()) throw ConfigError("paired sample: unequal lengths");
    if (!seeds.empty() && seeds.size() != a.size()) throw ConfigError("paired sample: seed labels do not match values");
  }
};

struct TTest {
  double t = 0;
  double df = 0;
  double p = 1;
  bool degenerate = false;  // zero variance of differences
};

// Paired t-test on b - a.
inline TTest paired_t(const PairedSample& s) {
  s.validate();
  const std::size_t n = s.a.size();
  if (n < 2) throw ConfigError("paired_t: needs at least 2 pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = s.b[i] - s.a[i];
  const MeanStd ms = mean_std(d, 1);
  TTest r;
  r.df = static_cast<double>(n - 1);
  if (ms.std == 0) {
    r.degenerate = true;
    if (ms.mean == 0) return r;  // t = 0, p = 1
    r.t = std::copysign(std::numeric_limits<double>::infinity(), ms.mean);
    r.p = 0;
    return r;
  }
  r.t = ms.mean / (ms.std / std::sqrt(static_cast<double>(n)));
  r.p = t_two_sided(r.t, r.df);
  return r;
}

inline double bonferroni(double p_raw, std::size_t m) {
  if (m == 0) throw ConfigError("bonferroni: family size must be >= 1");
  return std::min(1.0, static_cast<double>(m) * p_raw);
}

inline std::string star_band(double p_bonf) {
  if (p_bonf < 0.001) return "***";
  if (p_bonf < 0.01) return "**";
  if (p_bonf < 0.05) return "*";
  return "ns";
}

struct Interval {
  double lo = 0, hi = 0;
};

inline Interval wilson_interval(std::size_t k, std::size_t n, double z = 1.96) {
  if (n == 0 || k > n) throw ConfigError("wilson_interval: need 0 <= k <= n and n >= 1");
  const double nn = static_cast<double>(n), p = static_cast<double>(k) / nn, z2 = z * z;
  const double denom = 1 + z2 / nn;
  const double centre = (p + z2 / (2 * nn)) / denom;
  const double half = z * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn)) / denom;
  return {k == 0 ? 0.0 : std::max(0.0, centre - half), k == n ? 1.0 : std::min(1.0, centre + half)};
}

struct ClassifierMetrics {
  std::size_t correct = 0, n = 0;
  double accuracy = 0;
  double balanced_accuracy = 0;
  double auc = std::numeric_limits<double>::quiet_NaN();
  bool auc_defined = false;
  std::vector<std::size_t> misclassified;  // indices into the input
};

// Positive class is "helps"; the rule predicts helps when score > threshold.
inline ClassifierMetrics classifier_metrics(std::span<const double> scores, const std::vector<bool>& helps,
                                            double threshold) {
  if (scores.size() != helps.size() || scores.empty())
    throw ConfigError("classifier_metrics: scores and labels must be non-empty and equal length");
  ClassifierMetrics m;
  m.n = scores.size();
  std::size_t pos = 0, neg = 0, tp = 0, tn = 0;
  for (std::size_t i = 0; i < m.n; ++i) {
    const bool pred = scores[i] > threshold;
    (helps[i] ? pos : neg) += 1;
    if (pred == helps[i]) {
      ++m.correct;
      (helps[i] ? tp : tn) += 1;
    } else {
      m.misclassified.push_back(i);
    }
  }
  m.accuracy = static_cast<double>(m.correct) / static_cast<double>(m.n);
  if (pos > 0 && neg > 0) {
    m.balanced_accuracy = 0.5 * (static_cast<double>(tp) / pos + static_cast<double>(tn) / neg);
    double wins = 0;
    for (std::size_t i = 0; i < m.n; ++i)
      if (helps[i])
        for (std::size_t j = 0; j < m.n; ++j)
          if (!helps[j]) wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    m.auc = wins / (static_cast<double>(pos) * static_cast<double>(neg));
    m.auc_defined = true;
  } else {
    m.balanced_accuracy = m.accuracy;
  }
  return m;
}

// Ordinary least squares with an intercept column appended last. Solved by
// modified Gram-Schmidt QR on the design matrix.
struct OlsFit {
  std::vector<double> coef;  // one per regressor, then intercept
  double r2 = 0;
};

inline std::vector<double> ols_solve(const std::vector<std::vector<double>>& X, std::span<const double> y) {
  const std::size_t n = X.size();
  if (n == 0) throw ConfigError("ols: no rows");
  const std::size_t k = X[0].size();
  if (n < k) throw ConfigError("ols: fewer rows than coefficients");
  std::vector<std::vector<double>> q(k, std::vector<double>(n));
  std::vector<std::vector<double>> r(k, std::vector<double>(k, 0));
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < n; ++i) q[j][i] = X[i][j];
  for (std::size_t j = 0; j < k; ++j) {
    double scale = 0;
    for (double v : q[j]) scale = std::max(scale, std::fabs(v));
    for (std::size_t p = 0; p < j; ++p) {
      double d = 0;
      for (std::size_t i = 0; i < n; ++i) d += q[p][i] * q[j][i];
      r[p][j] = d;
      for (std::size_t i = 0; i < n; ++i) q[j][i] -= d * q[p][i];
    }
    double norm = 0;
    for (double v : q[j]) norm += v * v;
    norm = std::sqrt(norm);
    if (!(norm > 1e-10 * std::max(scale, 1.0))) throw ConfigError("ols: rank-deficient design");
    r[j][j] = norm;
    for (double& v : q[j]) v /= norm;
  }
  std::vector<double> qty(k, 0), beta(k, 0);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < n; ++i) qty[j] += q[j][i] * y[i];
  for (std::size_t j = k; j-- > 0;) {
    double s = qty[j];
    for (std::size_t p = j + 1; p < k; ++p) s -= r[j][p] * beta[p];
    beta[j] = s / r[j][j];
  }
  return beta;
}

struct FitRow {
  double sat = 0;
  double log10_p = 0;
  double delta = 0;
};

struct LinearFit2 {
  double b_sat = 0, b_logp = 0, intercept = 0;
  double r2 = 0;

  double predict(double sat, double log10_p) const { return b_sat * sat + b_logp * log10_p + intercept; }
};

// 1 - SSres/SStot with SStot about the evaluation set's own mean; negative
// when the fit does worse than that mean.
inline double r_squared(const LinearFit2& f, std::span<const FitRow> rows) {
  if (rows.empty()) throw ConfigError("r_squared: no rows");
  double mean = 0;
  for (const auto& r : rows) mean += r.delta;
  mean /= static_cast<double>(rows.size());
  double ss_res = 0, ss_tot = 0;
  for (const auto& r : rows) {
    const double e = r.delta - f.predict(r.sat, r.log10_p);
    ss_res += e * e;
    ss_tot += (r.delta - mean) * (r.delta - mean);
  }
  if (ss_tot == 0) throw ConfigError("r_squared: constant response");
  return 1 - ss_res / ss_tot;
}

inline LinearFit2 linear_fit_2var(std::span<const FitRow> rows) {
  if (rows.size() < 4) throw ConfigError("linear_fit_2var: needs at least 4 rows");
  std::vector<std::vector<double>> X;
  std::vector<double> y;
  for (const auto& r : rows) {
    X.push_back({r.sat, r.log10_p, 1.0});
    y.push_back(r.delta);
  }
  const auto b = ols_solve(X, y);
  LinearFit2 f{b[0], b[1], b[2], 0};
  f.r2 = r_squared(f, rows);
  return f;
}

// Threshold that maximizes accuracy on the given cells. Candidates are the
// midpoints between adjacent distinct scores plus one point outside each end;
// ties go to the lowest candidate.
inline double best_threshold(std::span<const double> scores, const std::vector<bool>& helps) {
  std::vector<double> s(scores.begin(), scores.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  std::vector<double> cand{s.front() - 1e-3};
  for (std::size_t i = 0; i + 1 < s.size(); ++i) cand.push_back(0.5 * (s[i] + s[i + 1]));
  cand.push_back(s.back() + 1e-3);
  double best = cand.front();
  std::size_t best_correct = 0;
  for (double c : cand) {
    const std::size_t k = classifier_metrics(scores, helps, c).correct;
    if (k > best_correct) {
      best_correct = k;
      best = c;
    }
  }
  return best;
}

struct LosoResult {
  std::vector<std::string> groups;
  std::vector<double> fold_thresholds;
  std::size_t correct = 0, n = 0;
  double accuracy = 0;
  double balanced_accuracy = 0;
};

// Leave-one-group-out: fit the threshold on the other groups, score the
// held-out group, pool predictions across folds.
inline LosoResult loso(std::span<const double> scores, const std::vector<bool>& helps,
                       std::span<const std::string> group) {
  if (scores.size() != helps.size() || scores.size() != group.size()) throw ConfigError("loso: length mismatch");
  LosoResult r;
  for (const auto& g : group)
    if (std::find(r.groups.begin(), r.groups.end(), g) == r.groups.end()) r.groups.push_back(g);
  if (r.groups.size() < 2) throw ConfigError("loso: needs at least two groups");
  std::size_t pos = 0, neg = 0, tp = 0, tn = 0;
  for (const auto& g : r.groups) {
    std::vector<double> ts;
    std::vector<bool> tl;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (group[i] != g) {
        ts.push_back(scores[i]);
        tl.push_back(helps[i]);
      }
    const double th = best_threshold(ts, tl);
    r.fold_thresholds.push_back(th);
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (group[i] == g) {
        const bool ok = (scores[i] > th) == helps[i];
        ++r.n;
        r.correct += ok;
        (helps[i] ? pos : neg) += 1;
        if (ok) (helps[i] ? tp : tn) += 1;
      }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.n);
  r.balanced_accuracy = (pos > 0 && neg > 0)
                            ? 0.5 * (static_cast<double>(tp) / pos + static_cast<double>(tn) / neg)
                            : r.accuracy;
  return r;
}

// Printed forms: 1 decimal for percentages, 3 significant figures for p.
inline std::string format_delta(double d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.1f%%", d);
  return buf;
}

inline std::string format_p(double p) {
  if (!std::isfinite(p)) return "n/a";
  if (p == 0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", p);
  return buf;
}

inline std::string format_fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace normlab::stats
