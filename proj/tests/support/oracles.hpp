#pragma once

// Direct-definition reference implementations used to check the metrics
// module. They share no code with it: sums use long double, quantiles are
// computed from a sorted copy, and AUC counts concordant pairs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

namespace oracle {

inline long double sum(const std::vector<double>& x) {
  long double s = 0.0L;
  for (double v : x) s += v;
  return s;
}

inline double mean(const std::vector<double>& x) { return static_cast<double>(sum(x) / x.size()); }

inline double sample_std(const std::vector<double>& x) {
  const long double m = sum(x) / x.size();
  long double ss = 0.0L;
  for (double v : x) ss += (v - m) * (v - m);
  return static_cast<double>(std::sqrt(ss / (x.size() - 1)));
}

/// Linear interpolation between closest ranks (numpy's default method).
inline double quantile(std::vector<double> x, double q) {
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

inline double r2(const std::vector<double>& y, const std::vector<double>& yhat) {
  const long double m = sum(y) / y.size();
  long double res = 0.0L, tot = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) {
    res += (static_cast<long double>(y[i]) - yhat[i]) * (static_cast<long double>(y[i]) - yhat[i]);
    tot += (y[i] - m) * (y[i] - m);
  }
  return static_cast<double>(1.0L - res / tot);
}

struct BlandAltman {
  double bias_mean, bias_median, std, iqr;
};

inline BlandAltman bland_altman(const std::vector<double>& y, const std::vector<double>& yhat) {
  std::vector<double> d;
  for (std::size_t i = 0; i < y.size(); ++i) d.push_back(yhat[i] - y[i]);
  return {mean(d), quantile(d, 0.5), sample_std(d), quantile(d, 0.75) - quantile(d, 0.25)};
}

struct Classification {
  std::optional<double> recall_zero, recall_nonzero, precision_zero, precision_nonzero, recall_macro, f1_macro, mcc,
      roc_auc;
  double accuracy;
};

inline std::optional<double> div(double a, double b) {
  if (b == 0.0) return std::nullopt;
  return a / b;
}

inline Classification classification(const std::vector<bool>& y, const std::vector<bool>& yhat,
                                     const std::vector<double>& s) {
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    tp += y[i] && yhat[i];
    tn += !y[i] && !yhat[i];
    fp += !y[i] && yhat[i];
    fn += y[i] && !yhat[i];
  }
  Classification c{};
  c.recall_nonzero = div(tp, tp + fn);
  c.recall_zero = div(tn, tn + fp);
  c.precision_nonzero = div(tp, tp + fp);
  c.precision_zero = div(tn, tn + fn);
  if (c.recall_zero && c.recall_nonzero) c.recall_macro = (*c.recall_zero + *c.recall_nonzero) / 2.0;
  // F1 per class from its precision and recall; a class with no support in
  // either labels or predictions leaves macro-F1 undefined.
  auto f1 = [](double t, double f_pos, double f_neg) -> std::optional<double> {
    if (t + f_pos + f_neg == 0.0) return std::nullopt;
    if (t == 0.0) return 0.0;
    const double p = t / (t + f_pos), r = t / (t + f_neg);
    return 2.0 * p * r / (p + r);
  };
  const auto f_pos = f1(tp, fp, fn), f_neg = f1(tn, fn, fp);
  if (f_pos && f_neg) c.f1_macro = (*f_pos + *f_neg) / 2.0;
  c.accuracy = (tp + tn) / static_cast<double>(y.size());
  const bool both = tp + fn > 0 && tn + fp > 0;
  if (both) {
    const double den = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
    c.mcc = den == 0.0 ? 0.0 : (tp * tn - fp * fn) / den;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!y[i]) continue;
      for (std::size_t j = 0; j < y.size(); ++j) {
        if (y[j]) continue;
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
    c.roc_auc = wins / pairs;
  }
  return c;
}

}  // namespace oracle
