#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvl/error.hpp"

namespace mvl::metrics {

using Values = std::span<const double>;

// ---------------------------------------------------------------------------
// Descriptive statistics

inline double mean(Values x) {
  if (x.empty()) throw UndefinedMetric("mean of an empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Sample standard deviation (ddof = 1).
inline double sample_std(Values x) {
  if (x.size() < 2) throw UndefinedMetric("sample STD needs at least two values");
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

/// Quantile with linear interpolation between order statistics at
/// position q * (n - 1).
inline double quantile(Values x, double q) {
  if (x.empty()) throw UndefinedMetric("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("quantile level must lie in [0, 1]");
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

inline double median(Values x) { return quantile(x, 0.5); }

inline void check_pair(Values y, Values yhat, std::size_t min_n, const char* what) {
  if (y.size() != yhat.size()) {
    throw ValidationError(std::string(what) + ": length mismatch (" + std::to_string(y.size()) + " vs " +
                          std::to_string(yhat.size()) + ")");
  }
  if (y.size() < min_n) {
    throw UndefinedMetric(std::string(what) + ": needs at least " + std::to_string(min_n) + " samples");
  }
}

// ---------------------------------------------------------------------------
// Regression

/// Coefficient of determination, 1 - SSres / SStot.
inline double r2(Values y, Values yhat) {
  check_pair(y, yhat, 2, "r2");
  const double m = mean(y);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    ss_tot += (y[i] - m) * (y[i] - m);
  }
  if (ss_tot == 0.0) throw UndefinedMetric("r2: ground truth is constant");
  return 1.0 - ss_res / ss_tot;
}

struct BlandAltman {
  double bias_mean = 0.0;
  double bias_median = 0.0;
  double std = 0.0;
  double iqr = 0.0;
  /// Plot coordinates: (mean of the pair, prediction - ground truth).
  std::vector<std::pair<double, double>> points;

  double lower_limit() const { return bias_mean - 1.96 * std; }
  double upper_limit() const { return bias_mean + 1.96 * std; }
};

/// Differences are oriented prediction minus ground truth.
inline BlandAltman bland_altman(Values y, Values yhat) {
  check_pair(y, yhat, 2, "bland_altman");
  std::vector<double> d(y.size());
  BlandAltman ba;
  ba.points.reserve(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    d[i] = yhat[i] - y[i];
    ba.points.emplace_back(0.5 * (y[i] + yhat[i]), d[i]);
  }
  ba.bias_mean = mean(d);
  ba.bias_median = median(d);
  ba.std = sample_std(d);
  ba.iqr = quantile(d, 0.75) - quantile(d, 0.25);
  return ba;
}

struct RegressionReport {
  std::optional<double> r2;  // undefined for constant ground truth
  double bias_mean = 0.0;
  double bias_median = 0.0;
  double deviation_std = 0.0;
  double deviation_iqr = 0.0;
  std::size_t n = 0;

  std::vector<std::pair<std::string, std::optional<double>>> fields() const {
    return {{"r2", r2},
            {"bias_mean", bias_mean},
            {"bias_median", bias_median},
            {"deviation_std", deviation_std},
            {"deviation_iqr", deviation_iqr}};
  }
};

inline RegressionReport regression_report(Values y, Values yhat) {
  const BlandAltman ba = bland_altman(y, yhat);
  RegressionReport r;
  try {
    r.r2 = metrics::r2(y, yhat);
  } catch (const UndefinedMetric&) {
    r.r2.reset();
  }
  r.bias_mean = ba.bias_mean;
  r.bias_median = ba.bias_median;
  r.deviation_std = ba.std;
  r.deviation_iqr = ba.iqr;
  r.n = y.size();
  return r;
}

// ---------------------------------------------------------------------------
// Classification. Flags are true for the "nonzero" class.

struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t n() const { return tp + tn + fp + fn; }
};

inline Confusion confusion(const std::vector<bool>& y, const std::vector<bool>& yhat) {
  if (y.size() != yhat.size()) throw ValidationError("classification: length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i]) {
      yhat[i] ? ++c.tp : ++c.fn;
    } else {
      yhat[i] ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

inline std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

/// Matthews correlation; 0 when any factor of the denominator is 0.
inline double mcc(const Confusion& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(den);
}

/// Macro-averaged F1 over the two classes; undefined when a class is absent
/// from both labels and predictions.
inline std::optional<double> f1_macro(const Confusion& c) {
  const auto f1_pos = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  const auto f1_neg = ratio(2 * c.tn, 2 * c.tn + c.fn + c.fp);
  if (!f1_pos || !f1_neg) return std::nullopt;
  return 0.5 * (*f1_pos + *f1_neg);
}

/// Fractional ranks (1-based) with ties replaced by their average rank.
inline std::vector<double> average_ranks(Values x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Area under the ROC curve for scores where larger means "nonzero", via the
/// Mann-Whitney rank statistic.
inline double roc_auc(const std::vector<bool>& y, Values scores) {
  if (y.size() != scores.size()) throw ValidationError("roc_auc: length mismatch");
  const auto ranks = average_ranks(scores);
  double n_pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i]) {
      n_pos += 1.0;
      rank_sum += ranks[i];
    }
  }
  const double n_neg = static_cast<double>(y.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw UndefinedMetric("roc_auc: both classes must be present");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

struct ClassificationReport {
  std::optional<double> recall_zero;
  std::optional<double> recall_nonzero;
  std::optional<double> precision_zero;
  std::optional<double> precision_nonzero;
  std::optional<double> recall_macro;
  std::optional<double> f1_macro;
  std::optional<double> mcc;      // undefined unless both label classes occur
  double accuracy = 0.0;
  std::optional<double> roc_auc;  // undefined unless both label classes occur
  std::size_t n = 0;

  std::vector<std::pair<std::string, std::optional<double>>> fields() const {
    return {{"recall_zero", recall_zero},
            {"recall_nonzero", recall_nonzero},
            {"precision_zero", precision_zero},
            {"precision_nonzero", precision_nonzero},
            {"recall_macro", recall_macro},
            {"f1_macro", f1_macro},
            {"mcc", mcc},
            {"accuracy", accuracy},
            {"roc_auc", roc_auc}};
  }
};

inline ClassificationReport classification_report(const std::vector<bool>& y, const std::vector<bool>& yhat,
                                                  Values scores) {
  if (y.size() != scores.size()) throw ValidationError("classification: length mismatch");
  if (y.empty()) throw UndefinedMetric("classification: empty sample");
  const Confusion c = confusion(y, yhat);
  ClassificationReport r;
  r.n = c.n();
  r.recall_nonzero = ratio(c.tp, c.tp + c.fn);
  r.recall_zero = ratio(c.tn, c.tn + c.fp);
  r.precision_nonzero = ratio(c.tp, c.tp + c.fp);
  r.precision_zero = ratio(c.tn, c.tn + c.fn);
  if (r.recall_zero && r.recall_nonzero) r.recall_macro = 0.5 * (*r.recall_zero + *r.recall_nonzero);
  r.f1_macro = metrics::f1_macro(c);
  r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.n());
  const bool both = c.tp + c.fn > 0 && c.tn + c.fp > 0;
  if (both) {
    r.mcc = metrics::mcc(c);
    r.roc_auc = metrics::roc_auc(y, scores);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Aggregation over rows (rater pairs or folds)

struct Aggregate {
  std::optional<double> mean;
  std::optional<double> std;
  std::size_t n = 0;         // rows contributing
  std::size_t excluded = 0;  // rows where the metric was undefined
};

using AggregateRow = std::vector<std::pair<std::string, Aggregate>>;

/// Column-wise mean and sample STD. Undefined entries are excluded and
/// counted; a column with fewer than two defined entries keeps the mean (if
/// any) and leaves the STD undefined.
template <class Report>
AggregateRow average_rows(const std::vector<Report>& rows) {
  AggregateRow out;
  if (rows.empty()) return out;
  const auto names = rows.front().fields();
  for (std::size_t k = 0; k < names.size(); ++k) {
    std::vector<double> vals;
    Aggregate a;
    for (const auto& row : rows) {
      const auto v = row.fields()[k].second;
      if (v) {
        vals.push_back(*v);
      } else {
        ++a.excluded;
      }
    }
    a.n = vals.size();
    if (!vals.empty()) a.mean = metrics::mean(vals);
    if (vals.size() >= 2) a.std = sample_std(vals);
    out.emplace_back(names[k].first, a);
  }
  return out;
}

inline const Aggregate& find(const AggregateRow& row, const std::string& name) {
  for (const auto& [k, v] : row) {
    if (k == name) return v;
  }
  throw ValidationError("no aggregate column named " + name);
}

template <class Report>
AggregateRow cross_val_aggregate(const std::vector<Report>& per_fold) {
  if (per_fold.size() < 2) throw UndefinedMetric("cross-validation aggregate needs at least two folds");
  return average_rows(per_fold);
}

// ---------------------------------------------------------------------------
// Inter-rater agreement

struct Rater {
  std::string name;
  std::vector<double> scores;
};

struct AgreementRow {
  std::string first;
  std::string second;  // treated as the prediction
  RegressionReport report;
};

struct AgreementTable {
  std::vector<AgreementRow> rows;
  AggregateRow average;
};

inline AgreementTable agreement_from_rows(std::vector<AgreementRow> rows) {
  AgreementTable t;
  std::vector<RegressionReport> reports;
  for (const auto& r : rows) reports.push_back(r.report);
  t.average = average_rows(reports);
  t.rows = std::move(rows);
  return t;
}

/// One row per unordered rater pair (i < j), the later rater as prediction.
inline AgreementTable agreement_table(const std::vector<Rater>& raters) {
  if (raters.size() < 2) throw ValidationError("agreement needs at least two raters");
  for (const auto& r : raters) {
    if (r.scores.size() != raters.front().scores.size()) {
      throw ValidationError("rater " + r.name + " scores a different number of studies");
    }
  }
  std::vector<AgreementRow> rows;
  for (std::size_t i = 0; i < raters.size(); ++i) {
    for (std::size_t j = i + 1; j < raters.size(); ++j) {
      rows.push_back({raters[i].name, raters[j].name, regression_report(raters[i].scores, raters[j].scores)});
    }
  }
  return agreement_from_rows(std::move(rows));
}

// ---------------------------------------------------------------------------
// Study-level evaluation

/// One evaluated study; the predictions CSV row.
struct PredictionRecord {
  std::string study_id;
  double pred_rca = 0.0;
  double pred_lca = 0.0;
  double pred_total = 0.0;
  bool pred_nonzero = false;
  double gt_rca = 0.0;
  double gt_lca = 0.0;
  double gt_total = 0.0;
};

struct EvalReport {
  RegressionReport regression;                 // total score
  std::optional<RegressionReport> rca;         // per-vessel rows
  std::optional<RegressionReport> lca;
  std::optional<ClassificationReport> classification;
  std::size_t n = 0;

  std::vector<std::pair<std::string, std::optional<double>>> fields() const {
    auto out = regression.fields();
    auto add = [&](const std::string& prefix, const auto& rep) {
      for (auto [k, v] : rep.fields()) out.emplace_back(prefix + k, v);
    };
    if (classification) add("", *classification);
    return out;
  }
};

inline EvalReport evaluate(const std::vector<PredictionRecord>& recs) {
  if (recs.size() < 2) throw UndefinedMetric("evaluation needs at least two studies");
  std::vector<double> gt, pred, gr, pr, gl, pl;
  std::vector<bool> y, yhat;
  for (const auto& r : recs) {
    gt.push_back(r.gt_total);
    pred.push_back(r.pred_total);
    gr.push_back(r.gt_rca);
    pr.push_back(r.pred_rca);
    gl.push_back(r.gt_lca);
    pl.push_back(r.pred_lca);
    y.push_back(r.gt_total > 0.0);
    yhat.push_back(r.pred_nonzero);
  }
  EvalReport e;
  e.n = recs.size();
  e.regression = regression_report(gt, pred);
  e.rca = regression_report(gr, pr);
  e.lca = regression_report(gl, pl);
  e.classification = classification_report(y, yhat, pred);
  return e;
}

/// Evaluation restricted to studies selected by a ground-truth predicate.
inline EvalReport subgroup_eval(const std::vector<PredictionRecord>& recs,
                                const std::function<bool(const PredictionRecord&)>& on_labels) {
  std::vector<PredictionRecord> subset;
  for (const auto& r : recs) {
    PredictionRecord labels_only = r;
    labels_only.pred_rca = labels_only.pred_lca = labels_only.pred_total = 0.0;
    labels_only.pred_nonzero = false;
    if (on_labels(labels_only)) subset.push_back(r);
  }
  if (subset.size() < 2) throw UndefinedMetric("subgroup has fewer than two studies");
  return evaluate(subset);
}

inline bool gt_nonzero(const PredictionRecord& r) { return r.gt_total > 0.0; }

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

template <class Report>
nlohmann::json fields_json(const Report& r) {
  nlohmann::json j = nlohmann::json::object();
  nlohmann::json undefined = nlohmann::json::array();
  for (const auto& [k, v] : r.fields()) {
    j[k] = opt_json(v);
    if (!v) undefined.push_back(k);
  }
  j["n"] = r.n;
  if (!undefined.empty()) j["undefined"] = undefined;
  return j;
}

inline nlohmann::json to_json(const RegressionReport& r) { return fields_json(r); }
inline nlohmann::json to_json(const ClassificationReport& r) { return fields_json(r); }

inline nlohmann::json to_json(const AggregateRow& row) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, a] : row) {
    j[k] = {{"mean", opt_json(a.mean)}, {"std", opt_json(a.std)}, {"n", a.n}, {"excluded", a.excluded}};
  }
  return j;
}

inline nlohmann::json to_json(const EvalReport& e) {
  nlohmann::json j = {{"n", e.n}, {"regression", to_json(e.regression)}};
  if (e.rca) j["regression_rca"] = to_json(*e.rca);
  if (e.lca) j["regression_lca"] = to_json(*e.lca);
  j["classification"] = e.classification ? to_json(*e.classification) : nlohmann::json();
  return j;
}

inline nlohmann::json to_json(const AgreementTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json row = to_json(r.report);
    row["pair"] = r.second + " vs " + r.first;
    row["reference"] = r.first;
    row["compared"] = r.second;
    rows.push_back(row);
  }
  return {{"pairs", rows}, {"average", to_json(t.average)}};
}

}  // namespace mvl::metrics
