#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mvl/metrics.hpp"
#include "support/oracles.hpp"

using namespace mvl;
using namespace mvl::metrics;

namespace {

constexpr double kTol = 1e-9;

struct Sample {
  std::vector<double> y, yhat, scores;
  std::vector<bool> labels, predicted;
};

/// Scores on a 0.5 grid so ties occur; labels follow score > 0.
Sample random_sample(std::mt19937_64& gen, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Sample s;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = u(gen) < 0.5 ? 0.0 : std::round(u(gen) * 60.0 * 2.0) / 2.0;
    const double yhat = std::max(0.0, std::round((y + (u(gen) - 0.5) * 20.0) * 2.0) / 2.0);
    s.y.push_back(y);
    s.yhat.push_back(yhat);
    s.scores.push_back(yhat);
    s.labels.push_back(y > 0.0);
    s.predicted.push_back(yhat > 4.0);
  }
  if (std::all_of(s.y.begin(), s.y.end(), [&](double v) { return v == s.y.front(); })) s.y.front() += 1.0;
  return s;
}

void expect_opt_near(const std::optional<double>& a, const std::optional<double>& b, const char* what) {
  ASSERT_EQ(a.has_value(), b.has_value()) << what;
  if (a) EXPECT_NEAR(*a, *b, kTol) << what;
}

}  // namespace

TEST(Metrics, RegressionMatchesOracleOnRandomInputs) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 50)(gen);
    const Sample s = random_sample(gen, n);
    EXPECT_NEAR(r2(s.y, s.yhat), oracle::r2(s.y, s.yhat), kTol);
    const auto ba = bland_altman(s.y, s.yhat);
    const auto ob = oracle::bland_altman(s.y, s.yhat);
    EXPECT_NEAR(ba.bias_mean, ob.bias_mean, kTol);
    EXPECT_NEAR(ba.bias_median, ob.bias_median, kTol);
    EXPECT_NEAR(ba.std, ob.std, kTol);
    EXPECT_NEAR(ba.iqr, ob.iqr, kTol);
  }
}

TEST(Metrics, ClassificationMatchesOracleOnRandomInputs) {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 50)(gen);
    const Sample s = random_sample(gen, n);
    const auto r = classification_report(s.labels, s.predicted, s.scores);
    const auto o = oracle::classification(s.labels, s.predicted, s.scores);
    expect_opt_near(r.recall_zero, o.recall_zero, "recall_zero");
    expect_opt_near(r.recall_nonzero, o.recall_nonzero, "recall_nonzero");
    expect_opt_near(r.precision_zero, o.precision_zero, "precision_zero");
    expect_opt_near(r.precision_nonzero, o.precision_nonzero, "precision_nonzero");
    expect_opt_near(r.recall_macro, o.recall_macro, "recall_macro");
    expect_opt_near(r.f1_macro, o.f1_macro, "f1_macro");
    expect_opt_near(r.mcc, o.mcc, "mcc");
    expect_opt_near(r.roc_auc, o.roc_auc, "roc_auc");
    EXPECT_NEAR(r.accuracy, o.accuracy, kTol);
  }
}

TEST(Metrics, PerfectPredictionGivesUnitR2AndZeroBias) {
  const std::vector<double> y{0, 3, 7.5, 22, 40};
  EXPECT_DOUBLE_EQ(r2(y, y), 1.0);
  const auto rep = regression_report(y, y);
  EXPECT_EQ(rep.bias_mean, 0.0);
  EXPECT_EQ(rep.deviation_std, 0.0);
  EXPECT_EQ(rep.deviation_iqr, 0.0);
}

TEST(Metrics, MeanPredictorGivesZeroR2) {
  const std::vector<double> y{1, 2, 3, 10};
  const std::vector<double> m(4, 4.0);
  EXPECT_NEAR(r2(y, m), 0.0, 1e-12);
}

TEST(Metrics, ConstantGroundTruthMakesR2Undefined) {
  const std::vector<double> y{5, 5, 5};
  const std::vector<double> p{4, 5, 6};
  EXPECT_THROW(r2(y, p), UndefinedMetric);
  EXPECT_FALSE(regression_report(y, p).r2.has_value());
}

TEST(Metrics, LengthMismatchIsRejected) {
  const std::vector<double> a{1, 2, 3}, b{1, 2};
  EXPECT_THROW(r2(a, b), ValidationError);
  EXPECT_THROW(bland_altman(a, b), ValidationError);
}

TEST(Metrics, BlandAltmanOrientationIsPredictionMinusTruth) {
  const std::vector<double> y{10, 20, 30}, p{12, 22, 32};
  const auto ba = bland_altman(y, p);
  EXPECT_DOUBLE_EQ(ba.bias_mean, 2.0);
  EXPECT_DOUBLE_EQ(ba.points[0].first, 11.0);
  EXPECT_DOUBLE_EQ(ba.points[0].second, 2.0);
  EXPECT_NEAR(ba.lower_limit(), 2.0, 1e-12);
}

TEST(Metrics, QuantileUsesLinearInterpolation) {
  const std::vector<double> d{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(quantile(d, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(quantile(d, 0.75), 3.25);
  EXPECT_DOUBLE_EQ(median(d), 2.5);
}

TEST(Metrics, AucOfPerfectRankingIsOneAndTiesGiveHalf) {
  const std::vector<bool> y{false, false, true, true};
  EXPECT_DOUBLE_EQ(roc_auc(y, std::vector<double>{0.1, 0.2, 0.8, 0.9}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc(y, std::vector<double>{1, 1, 1, 1}), 0.5);
  EXPECT_THROW(roc_auc({true, true}, std::vector<double>{1, 2}), UndefinedMetric);
}

TEST(Metrics, MccIsZeroWhenDenominatorVanishes) {
  const std::vector<bool> y{true, false, true}, all_pos{true, true, true};
  const auto r = classification_report(y, all_pos, std::vector<double>{1, 1, 1});
  ASSERT_TRUE(r.mcc.has_value());
  EXPECT_EQ(*r.mcc, 0.0);
  EXPECT_FALSE(r.recall_zero.has_value() && r.precision_zero.has_value());
}

TEST(Metrics, SingleClassLeavesMccAndAucUndefined) {
  const std::vector<bool> y{true, true, true}, p{true, false, true};
  const auto r = classification_report(y, p, std::vector<double>{3, 1, 2});
  EXPECT_FALSE(r.mcc.has_value());
  EXPECT_FALSE(r.roc_auc.has_value());
  EXPECT_NEAR(r.accuracy, 2.0 / 3.0, 1e-12);
  const auto j = to_json(r);
  ASSERT_TRUE(j.contains("undefined"));
}

TEST(Metrics, PublishedAgreementRowsAverageToPrintedBiasAndDeviation) {
  // Rows: expert 1 vs dataset, expert 2 vs dataset, expert 2 vs expert 1.
  std::vector<AgreementRow> rows;
  const double vals[3][4] = {{0.593, -1.80, -1.00, 9.52}, {0.829, 0.53, 0.00, 6.69}, {0.674, 1.27, 1.50, 9.16}};
  for (const auto& v : vals) {
    RegressionReport r;
    r.r2 = v[0];
    r.bias_mean = v[1];
    r.bias_median = v[2];
    r.deviation_std = v[3];
    rows.push_back({"a", "b", r});
  }
  const auto t = agreement_from_rows(rows);
  auto rounded = [](double x) { return std::round(x * 100.0) / 100.0; };
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "bias_mean").mean), 0.00);
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "bias_mean").std), 1.60);
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "deviation_std").mean), 8.46);
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "deviation_std").std), 1.54);
  // The printed R² average (0.72 +- 0.10) disagrees with the sample
  // statistics of its own column; the computed value is kept.
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "r2").mean), 0.70);
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "r2").std), 0.12);
  // The printed bias-median average is -0.17; the column averages to +0.17.
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "bias_median").mean), 0.17);
  EXPECT_DOUBLE_EQ(rounded(*find(t.average, "bias_median").std), 1.26);
}

TEST(Metrics, AgreementOfIdenticalRatersIsPerfect) {
  const std::vector<Rater> raters{{"a", {0, 4, 9, 22}}, {"b", {0, 4, 9, 22}}};
  const auto t = agreement_table(raters);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_DOUBLE_EQ(*t.rows[0].report.r2, 1.0);
  EXPECT_EQ(t.rows[0].report.bias_mean, 0.0);
}

TEST(Metrics, ThreeRatersGiveThreePairs) {
  const std::vector<Rater> raters{{"a", {0, 4, 9, 22}}, {"b", {1, 4, 8, 20}}, {"c", {0, 6, 9, 25}}};
  const auto t = agreement_table(raters);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(find(t.average, "r2").n, 3u);
  EXPECT_THROW(agreement_table({raters[0]}), ValidationError);
}

TEST(Metrics, AggregateExcludesUndefinedEntries) {
  RegressionReport a, b, c;
  a.r2 = 0.5;
  b.r2.reset();
  c.r2 = 0.7;
  const auto row = average_rows(std::vector<RegressionReport>{a, b, c});
  const auto& agg = find(row, "r2");
  EXPECT_EQ(agg.n, 2u);
  EXPECT_EQ(agg.excluded, 1u);
  EXPECT_NEAR(*agg.mean, 0.6, 1e-12);
  EXPECT_THROW(cross_val_aggregate(std::vector<RegressionReport>{a}), UndefinedMetric);
}

TEST(Metrics, SubgroupPredicateSeesLabelsOnly) {
  std::vector<PredictionRecord> recs;
  for (int i = 0; i < 6; ++i) {
    PredictionRecord r;
    r.study_id = "s" + std::to_string(i);
    r.gt_total = i % 2 ? 5.0 + i : 0.0;
    r.gt_lca = r.gt_total;
    r.pred_total = r.pred_lca = 3.0;
    r.pred_nonzero = true;
    recs.push_back(r);
  }
  std::size_t seen_pred = 0;
  const auto e = subgroup_eval(recs, [&](const PredictionRecord& r) {
    seen_pred += r.pred_total != 0.0 || r.pred_nonzero;
    return r.gt_total > 0.0;
  });
  EXPECT_EQ(seen_pred, 0u);
  EXPECT_EQ(e.n, 3u);
}

TEST(Metrics, PropertyShiftingPredictionsShiftsBiasOnly) {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Sample s = random_sample(gen, 30);
    std::vector<double> shifted = s.yhat;
    for (auto& v : shifted) v += 2.5;
    const auto a = bland_altman(s.y, s.yhat), b = bland_altman(s.y, shifted);
    EXPECT_NEAR(b.bias_mean - a.bias_mean, 2.5, 1e-9);
    EXPECT_NEAR(b.bias_median - a.bias_median, 2.5, 1e-9);
    EXPECT_NEAR(b.std, a.std, 1e-9);
    EXPECT_NEAR(b.iqr, a.iqr, 1e-9);
  }
}

TEST(Metrics, PropertyAucIsInvariantUnderMonotoneTransforms) {
  std::mt19937_64 gen(14);
  for (int trial = 0; trial < 10; ++trial) {
    const Sample s = random_sample(gen, 40);
    if (std::count(s.labels.begin(), s.labels.end(), true) % 40 == 0) continue;
    std::vector<double> t;
    for (double v : s.scores) t.push_back(std::exp(0.1 * v) + 3.0);
    EXPECT_NEAR(roc_auc(s.labels, s.scores), roc_auc(s.labels, t), 1e-12);
  }
}

TEST(Metrics, PropertyR2IsAtMostOne) {
  std::mt19937_64 gen(15);
  for (int trial = 0; trial < 20; ++trial) {
    const Sample s = random_sample(gen, 25);
    EXPECT_LE(r2(s.y, s.yhat), 1.0 + 1e-12);
  }
}
