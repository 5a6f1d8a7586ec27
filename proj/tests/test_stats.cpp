// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "normlab/fixtures.hpp"
#include "normlab/stats.hpp"

using namespace normlab;
using namespace normlab::stats;
namespace fx = normlab::fixtures;

namespace {

std::vector<double> seeds_of(const fx::SeedRow& r) { return {r.values.begin(), r.values.end()}; }

PairedSample pair_rows(const fx::SeedRow& a, const fx::SeedRow& b) {
  PairedSample s;
  s.a = seeds_of(a);
  s.b = seeds_of(b);
  s.seeds = {fx::kSeeds.begin(), fx::kSeeds.end()};
  return s;
}

// Student t density integrated by composite Simpson from 0 to |t|.
double t_cdf_simpson(double t, double df) {
  const double c = std::tgamma((df + 1) / 2) / (std::sqrt(df * std::numbers::pi) * std::tgamma(df / 2));
  auto f = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int n = 20000;
  const double b = std::abs(t), h = b / n;
  double s = f(0) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * f(i * h);
  const double half = s * h / 3;
  return t >= 0 ? 0.5 + half : 0.5 - half;
}

std::vector<FitRow> fit_rows(const std::vector<fx::SaturationCell>& cells) {
  std::vector<FitRow> rows;
  for (const auto& c : cells) rows.push_back({c.sat, std::log10(c.params / 1e6), c.delta});
  return rows;
}

}  // namespace

TEST(MeanStd, PublishedScaleOneRows) {
  const auto& t = fx::scale1_per_seed();
  // The printed spreads are population (n) standard deviations.
  auto van = mean_std(seeds_of(t.row("1M", "vanilla")), 0);
  EXPECT_NEAR(van.mean, 9.384, 5e-4);
  EXPECT_NEAR(van.std, 0.038, 5e-4);
  auto dyt = mean_std(seeds_of(t.row("1M", "dyt")), 0);
  EXPECT_NEAR(dyt.mean, 6.819, 1e-3);
  EXPECT_NEAR(dyt.std, 0.171, 5e-4);
}

TEST(MeanStd, EveryPublishedRowMatchesPrintedValues) {
  for (const auto* table : {&fx::scale1_per_seed(), &fx::scale4_per_seed()})
    for (const auto& r : table->rows) {
      auto ms = mean_std(seeds_of(r), 0);
      EXPECT_NEAR(ms.mean, r.printed_mean, 1e-3) << table->scale << " " << r.tokens << " " << r.config;
      EXPECT_NEAR(ms.std, r.printed_std, 1e-3) << table->scale << " " << r.tokens << " " << r.config;
    }
}

TEST(MeanStd, SampleAndDegenerateCases) {
  const std::vector<double> v = {6.784, 7.043, 6.628};
  const double m = (6.784 + 7.043 + 6.628) / 3;
  const double ss = std::pow(6.784 - m, 2) + std::pow(7.043 - m, 2) + std::pow(6.628 - m, 2);
  auto s = mean_std(v);
  EXPECT_TRUE(s.std_defined);
  EXPECT_NEAR(s.std, std::sqrt(ss / 2), 1e-15);
  EXPECT_EQ(mean_std(std::vector<double>{4, 4, 4}).std, 0.0);
  auto one = mean_std(std::vector<double>{3.0});
  EXPECT_FALSE(one.std_defined);
  EXPECT_EQ(one.mean, 3.0);
  EXPECT_THROW(mean_std(std::vector<double>{}), ConfigError);
}

TEST(Delta, PublishedCells) {
  EXPECT_NEAR(delta_percent(9.384, 6.819), -27.3, 0.05);
  EXPECT_NEAR(delta_percent(3.631, 4.313), 18.8, 0.05);
  EXPECT_EQ(delta_percent(2.5, 2.5), 0.0);
  EXPECT_THROW(delta_percent(0, 1), ConfigError);
  EXPECT_EQ(format_delta(-27.3197), "-27.3%");
  EXPECT_EQ(format_delta(18.83), "+18.8%");
}

TEST(Delta, SignificanceTableDeltasFromPrintedMeans) {
  for (const auto& r : fx::significance_rows())
    // Published deltas come from unrounded means; two cells drift by up to 0.08 points.
    EXPECT_NEAR(delta_percent(r.vanilla_mean, r.mod_mean), r.delta, 0.1) << r.scale << "/" << r.tokens << " " << r.mod;
}

TEST(TDistribution, ClosedFormDfTwo) {
  for (double t : {-6.0, -1.3, 0.0, 0.4, 2.0, 24.458}) {
    const double exact = 0.5 + t / (2 * std::sqrt(2 + t * t));
    EXPECT_NEAR(t_cdf(t, 2), exact, 1e-12) << t;
  }
}

TEST(TDistribution, SimpsonOracleDfTwoAndThree) {
  for (double df : {2.0, 3.0})
    for (double t : {-8.0, -2.5, -0.3, 0.0, 0.7, 1.9, 4.3, 12.0})
      EXPECT_NEAR(t_cdf(t, df), t_cdf_simpson(t, df), 1e-8) << "df " << df << " t " << t;
}

TEST(TDistribution, IncompleteBetaEdges) {
  EXPECT_EQ(incomplete_beta(2, 3, 0), 0.0);
  EXPECT_EQ(incomplete_beta(2, 3, 1), 1.0);
  // I_x(1, 1) = x; I_x(a, 1) = x^a
  EXPECT_NEAR(incomplete_beta(1, 1, 0.37), 0.37, 1e-14);
  EXPECT_NEAR(incomplete_beta(3.5, 1, 0.6), std::pow(0.6, 3.5), 1e-13);
  EXPECT_NEAR(t_two_sided(0, 5), 1.0, 1e-15);
}

TEST(PairedT, PublishedScaleOneDyt) {
  const auto& t = fx::scale1_per_seed();
  auto r = paired_t(pair_rows(t.row("1M", "vanilla"), t.row("1M", "dyt")));
  EXPECT_EQ(r.df, 2.0);
  EXPECT_LT(r.t, 0);
  EXPECT_NEAR(r.p, 0.0017, 3e-4);
  EXPECT_NEAR(bonferroni(r.p, 19), 0.032, 2e-3);
  EXPECT_EQ(star_band(bonferroni(r.p, 19)), "*");
}

TEST(PairedT, ReproducesEveryRowWithPerSeedData) {
  // Rows whose per-seed values ship with the fixtures: Scale 1 and Scale 4.
  int checked = 0;
  for (const auto& row : fx::significance_rows()) {
    const fx::SeedTable* table = row.scale == "S1" ? &fx::scale1_per_seed() : row.scale == "S4" ? &fx::scale4_per_seed() : nullptr;
    if (!table) continue;
    auto r = paired_t(pair_rows(table->row(row.tokens, "vanilla"), table->row(row.tokens, row.mod)));
    const double tol = std::max(3e-4, 0.1 * row.p_raw);
    EXPECT_NEAR(r.p, row.p_raw, tol) << row.scale << "/" << row.tokens << " " << row.mod;
    ++checked;
  }
  EXPECT_EQ(checked, 11);
}

TEST(PairedT, IdenticalConditions) {
  PairedSample s{{1, 2, 3}, {1, 2, 3}, {}};
  auto r = paired_t(s);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);
  EXPECT_TRUE(r.degenerate);
}

TEST(PairedT, ConstantDifferencesFlagged) {
  PairedSample s{{1, 2, 3}, {2, 3, 4}, {}};
  auto r = paired_t(s);
  EXPECT_TRUE(std::isinf(r.t));
  EXPECT_GT(r.t, 0);
  EXPECT_EQ(r.p, 0.0);
  EXPECT_TRUE(r.degenerate);
}

TEST(PairedT, AntisymmetricUnderSwap) {
  CounterRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    PairedSample s;
    for (int i = 0; i < 5; ++i) {
      s.a.push_back(rng.normal());
      s.b.push_back(rng.normal() + 0.3);
    }
    PairedSample w{s.b, s.a, {}};
    auto x = paired_t(s), y = paired_t(w);
    EXPECT_DOUBLE_EQ(x.t, -y.t);
    EXPECT_NEAR(x.p, y.p, 1e-14);
  }
}

TEST(PairedT, AlignmentBySeedLabel) {
  std::map<std::string, double> a = {{"1337", 1.0}, {"42", 2.0}, {"7", 3.0}};
  std::map<std::string, double> b = {{"7", 3.5}, {"1337", 1.1}, {"42", 2.2}};
  auto s = PairedSample::align(a, b);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(b.at(s.seeds[i]), s.b[i]);
  b.erase("42");
  EXPECT_THROW(PairedSample::align(a, b), ConfigError);
  EXPECT_THROW(paired_t(PairedSample{{1}, {2}, {}}), ConfigError);
  EXPECT_THROW(paired_t(PairedSample{{1, 2}, {2}, {}}), ConfigError);
}

TEST(Bonferroni, ExamplesAndProperties) {
  EXPECT_NEAR(bonferroni(0.0017, 19), 0.032, 5e-4);
  EXPECT_NEAR(bonferroni(0.0041, 19), 0.078, 5e-4);
  EXPECT_EQ(bonferroni(0.9, 19), 1.0);
  EXPECT_THROW(bonferroni(0.1, 0), ConfigError);
  double prev_p = 0;
  for (double p = 0; p <= 1.0; p += 0.01) {
    const double b = bonferroni(p, 7);
    EXPECT_LE(b, 1.0);
    EXPECT_GE(b, prev_p);
    EXPECT_GE(bonferroni(p, 8), b);
    prev_p = b;
  }
}

TEST(Bonferroni, PublishedFamilyColumn) {
  for (const auto& r : fx::significance_rows()) {
    // Printed p_raw is rounded, so allow the rounding error times 19.
    const double tol = 19 * 0.5 * std::pow(10.0, std::floor(std::log10(r.p_raw)) - 1) + 1e-3;
    EXPECT_NEAR(bonferroni(r.p_raw, fx::kSignificanceFamily), r.p_bonf, tol) << r.scale << "/" << r.tokens << " " << r.mod;
  }
}

TEST(Wilson, PublishedInterval) {
  auto w = wilson_interval(9, 12);
  EXPECT_NEAR(w.lo, 0.468, 5e-3);
  EXPECT_NEAR(w.hi, 0.911, 5e-3);
  EXPECT_EQ(std::lround(100 * w.lo), 47);
  EXPECT_EQ(std::lround(100 * w.hi), 91);
}

TEST(Wilson, BoundsAndContainment) {
  for (std::size_t n : {1u, 2u, 12u, 100u})
    for (std::size_t k = 0; k <= n; ++k) {
      auto w = wilson_interval(k, n);
      const double p = static_cast<double>(k) / static_cast<double>(n);
      EXPECT_LE(w.lo, p);
      EXPECT_GE(w.hi, p);
      EXPECT_GE(w.lo, 0.0);
      EXPECT_LE(w.hi, 1.0);
    }
  EXPECT_EQ(wilson_interval(0, 9).lo, 0.0);
  EXPECT_EQ(wilson_interval(9, 9).hi, 1.0);
  EXPECT_THROW(wilson_interval(3, 2), ConfigError);
}

TEST(Classifier, TwelveCellFixture) {
  std::vector<double> s;
  std::vector<bool> y;
  const auto cells = fx::saturation_cells_12();
  for (const auto& c : cells) {
    s.push_back(c.sat);
    y.push_back(c.helps());
  }
  auto m = classifier_metrics(s, y, 0.43);
  EXPECT_EQ(m.correct, 9u);
  EXPECT_NEAR(m.balanced_accuracy, 0.688, 1e-3);
  EXPECT_NEAR(m.auc, 0.75, 0.01);
  std::vector<std::string> wrong;
  for (auto i : m.misclassified) wrong.push_back(cells[i].label());
  EXPECT_EQ(wrong, (std::vector<std::string>{"S2/10M", "S3/1M", "S3/10M"}));
}

TEST(Classifier, FourteenCellFixture) {
  std::vector<double> s;
  std::vector<bool> y;
  for (const auto& c : fx::saturation_cells_14()) {
    s.push_back(c.sat);
    y.push_back(c.helps());
  }
  auto m = classifier_metrics(s, y, 0.43);
  EXPECT_EQ(m.correct, 9u);
  EXPECT_EQ(m.n, 14u);
  EXPECT_NEAR(m.auc, 0.60, 0.01);
}

TEST(Classifier, SeparatedTiesAndSingleClass) {
  EXPECT_EQ(classifier_metrics(std::vector<double>{0.1, 0.2, 0.8, 0.9}, {false, false, true, true}, 0.5).auc, 1.0);
  EXPECT_EQ(classifier_metrics(std::vector<double>{0.5, 0.5}, {false, true}, 0.5).auc, 0.5);
  auto single = classifier_metrics(std::vector<double>{0.1, 0.9}, {true, true}, 0.5);
  EXPECT_FALSE(single.auc_defined);
  EXPECT_TRUE(std::isnan(single.auc));
}

TEST(Classifier, AucInvariantUnderMonotoneTransform) {
  std::vector<double> s;
  std::vector<bool> y;
  for (const auto& c : fx::saturation_cells_14()) {
    s.push_back(c.sat);
    y.push_back(c.helps());
  }
  const double base = classifier_metrics(s, y, 0.43).auc;
  for (auto f : {+[](double x) { return std::exp(5 * x); }, +[](double x) { return x * x * x - 3; },
                 +[](double x) { return std::log(x); }}) {
    std::vector<double> t;
    for (double v : s) t.push_back(f(v));
    EXPECT_DOUBLE_EQ(classifier_metrics(t, y, 0.0).auc, base);
  }
}

TEST(Classifier, LabelFlipComplementsAccuracy) {
  std::vector<double> s;
  std::vector<bool> y, flipped;
  for (const auto& c : fx::saturation_cells_12()) {
    s.push_back(c.sat);
    y.push_back(c.helps());
    flipped.push_back(!c.helps());
  }
  for (double t : {0.2, 0.3, 0.43, 0.47}) {
    EXPECT_DOUBLE_EQ(classifier_metrics(s, flipped, t).accuracy, 1 - classifier_metrics(s, y, t).accuracy);
  }
}

TEST(LinearFit, ExactLinearData) {
  std::vector<FitRow> rows;
  for (int i = 0; i < 8; ++i) {
    const double sat = 0.1 * i, lp = 1.5 + 0.37 * (i % 3);
    rows.push_back({sat, lp, -50 * sat + 3 * lp + 7});
  }
  auto f = linear_fit_2var(rows);
  EXPECT_NEAR(f.b_sat, -50, 1e-9);
  EXPECT_NEAR(f.b_logp, 3, 1e-9);
  EXPECT_NEAR(f.intercept, 7, 1e-9);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
}

TEST(LinearFit, RejectsDegenerateDesigns) {
  std::vector<FitRow> collinear;
  for (int i = 0; i < 6; ++i) collinear.push_back({0.1 * i, 0.2 * i, static_cast<double>(i * i)});
  EXPECT_THROW(linear_fit_2var(collinear), ConfigError);
  EXPECT_THROW(linear_fit_2var(std::vector<FitRow>(3, FitRow{0.1, 2, 3})), ConfigError);
}

TEST(LinearFit, TwelveCellFitAgreesWithNormalEquations) {
  // Independent route: Eigen's pivoted Householder QR on the same design.
  const auto rows = fit_rows(fx::saturation_cells_12());
  Eigen::MatrixXd X(rows.size(), 3);
  Eigen::VectorXd y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    X(i, 0) = rows[i].sat;
    X(i, 1) = rows[i].log10_p;
    X(i, 2) = 1;
    y(i) = rows[i].delta;
  }
  const Eigen::VectorXd b = X.colPivHouseholderQr().solve(y);
  auto f = linear_fit_2var(rows);
  EXPECT_NEAR(f.b_sat, b(0), 1e-9);
  EXPECT_NEAR(f.b_logp, b(1), 1e-9);
  EXPECT_NEAR(f.intercept, b(2), 1e-9);
  const double ss_res = (y - X * b).squaredNorm(), ss_tot = (y.array() - y.mean()).square().sum();
  EXPECT_NEAR(f.r2, 1 - ss_res / ss_tot, 1e-12);
  // The coefficient on saturation is negative: more saturation, larger DyT gain.
  EXPECT_LT(f.b_sat, 0);
}

TEST(LinearFit, OutOfSampleRSquaredCanBeNegative) {
  const auto train = fit_rows(fx::saturation_cells_12());
  auto f = linear_fit_2var(train);
  std::vector<FitRow> flipped;
  for (const auto& r : train) flipped.push_back({r.sat, r.log10_p, -f.predict(r.sat, r.log10_p)});
  EXPECT_LT(r_squared(f, flipped), 0);
}

TEST(Loso, FoldThresholdRange) {
  std::vector<double> s;
  std::vector<bool> y;
  std::vector<std::string> g;
  for (const auto& c : fx::saturation_cells_12()) {
    s.push_back(c.sat);
    y.push_back(c.helps());
    g.push_back(c.scale);
  }
  auto r = loso(s, y, g);
  EXPECT_EQ(r.groups.size(), 4u);
  EXPECT_EQ(r.n, 12u);
  const auto [lo, hi] = std::minmax_element(r.fold_thresholds.begin(), r.fold_thresholds.end());
  EXPECT_NEAR(*lo, 0.27, 0.02);
  EXPECT_NEAR(*hi, 0.49, 0.02);
}

TEST(Loso, BestThresholdSeparates) {
  const std::vector<double> s = {0.1, 0.2, 0.6, 0.7};
  const std::vector<bool> y = {false, false, true, true};
  const double t = best_threshold(s, y);
  EXPECT_DOUBLE_EQ(t, 0.4);
  EXPECT_THROW(loso(s, y, std::vector<std::string>(4, "a")), ConfigError);
}

TEST(Format, PValues) {
  EXPECT_EQ(format_p(0.0016675), "0.00167");
  EXPECT_EQ(format_p(0.369), "0.369");
  EXPECT_EQ(format_p(std::nan("")), "n/a");
  EXPECT_EQ(format_fixed(9.38400001, 3), "9.384");
}
