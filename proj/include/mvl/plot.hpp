#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mvl/error.hpp"
#include "mvl/metrics.hpp"

// SVG figures. Every number printed on a figure comes from a metrics report
// passed in by the caller.

namespace mvl::plot {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string r2_label(const std::optional<double>& r2) {
  return r2 ? "R²=" + fixed(*r2, 3) : std::string("R²=undefined");
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

/// Range covering all values with a small margin; degenerate ranges widen to 1.
inline Range padded_range(const std::vector<double>& v) {
  if (v.empty()) return {};
  auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  double lo = *mn, hi = *mx;
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

/// Minimal SVG canvas with a data-to-pixel mapping for one axis box.
class Canvas {
 public:
  static constexpr double kWidth = 480, kHeight = 420;
  static constexpr double kLeft = 64, kRight = 20, kTop = 40, kBottom = 56;

  Canvas(Range x, Range y) : x_(x), y_(y) {}

  double px(double x) const { return kLeft + (x - x_.lo) / (x_.hi - x_.lo) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y_.lo) / (y_.hi - y_.lo) * (kHeight - kTop - kBottom); }

  void line(double x0, double y0, double x1, double y1, const std::string& stroke, const std::string& dash = "") {
    body_ << "<line x1=\"" << px(x0) << "\" y1=\"" << py(y0) << "\" x2=\"" << px(x1) << "\" y2=\"" << py(y1)
          << "\" stroke=\"" << stroke << "\" stroke-width=\"1.5\"";
    if (!dash.empty()) body_ << " stroke-dasharray=\"" << dash << "\"";
    body_ << "/>\n";
  }

  void point(double x, double y) {
    body_ << "<circle class=\"point\" cx=\"" << px(x) << "\" cy=\"" << py(y)
          << "\" r=\"3\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n";
  }

  void text(double x_px, double y_px, const std::string& s, const std::string& anchor = "start",
            const std::string& cls = "") {
    body_ << "<text x=\"" << x_px << "\" y=\"" << y_px << "\" font-family=\"sans-serif\" font-size=\"13\""
          << " text-anchor=\"" << anchor << "\"";
    if (!cls.empty()) body_ << " class=\"" << cls << "\"";
    body_ << ">" << escape(s) << "</text>\n";
  }

  std::string render(const std::string& title, const std::string& xlabel, const std::string& ylabel) const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kWidth - kLeft - kRight
        << "\" height=\"" << kHeight - kTop - kBottom << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double fx = x_.lo + (x_.hi - x_.lo) * i / 4.0;
      const double fy = y_.lo + (y_.hi - y_.lo) * i / 4.0;
      out << "<text x=\"" << px(fx) << "\" y=\"" << kHeight - kBottom + 16
          << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << fixed(fx, 1) << "</text>\n";
      out << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(fy) + 4
          << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << fixed(fy, 1) << "</text>\n";
    }
    out << "<text x=\"" << kWidth / 2 << "\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\""
        << " text-anchor=\"middle\">" << escape(title) << "</text>\n";
    out << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 14
        << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n";
    out << "<text transform=\"translate(16," << (kTop + kHeight - kBottom) / 2
        << ") rotate(-90)\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">" << escape(ylabel)
        << "</text>\n";
    out << "<g>\n" << body_.str() << "</g>\n</svg>\n";
    return out.str();
  }

 private:
  Range x_, y_;
  std::ostringstream body_;
};

struct Labels {
  std::string title;
  std::string x = "Ground truth";
  std::string y = "Prediction";
};

/// Scatter of (x, y) with the identity line and the report's R² annotation.
inline std::string correlation_svg(metrics::Values x, metrics::Values y, const metrics::RegressionReport& report,
                                   const Labels& labels = {}) {
  if (x.size() != y.size()) throw ValidationError("correlation plot needs paired values");
  std::vector<double> all(x.begin(), x.end());
  all.insert(all.end(), y.begin(), y.end());
  const Range r = padded_range(all);
  Canvas c(r, r);
  c.line(r.lo, r.lo, r.hi, r.hi, "#888888", "6,4");
  for (std::size_t i = 0; i < x.size(); ++i) c.point(x[i], y[i]);
  c.text(Canvas::kLeft + 10, Canvas::kTop + 20, r2_label(report.r2), "start", "annotation");
  return c.render(labels.title, labels.x, labels.y);
}

/// Scatter of (pair mean, difference) with the bias line and the
/// bias +- 1.96 STD limits.
inline std::string bland_altman_svg(const metrics::BlandAltman& ba,
                                    const Labels& labels = {"", "Mean of pair", "Difference"}) {
  std::vector<double> xs, ys{ba.lower_limit(), ba.upper_limit(), 0.0};
  for (const auto& [m, d] : ba.points) {
    xs.push_back(m);
    ys.push_back(d);
  }
  const Range rx = padded_range(xs), ry = padded_range(ys);
  Canvas c(rx, ry);
  c.line(rx.lo, 0.0, rx.hi, 0.0, "#cccccc");
  c.line(rx.lo, ba.bias_mean, rx.hi, ba.bias_mean, "#d62728");
  c.line(rx.lo, ba.lower_limit(), rx.hi, ba.lower_limit(), "#d62728", "6,4");
  c.line(rx.lo, ba.upper_limit(), rx.hi, ba.upper_limit(), "#d62728", "6,4");
  for (const auto& [m, d] : ba.points) c.point(m, d);
  c.text(Canvas::kWidth - Canvas::kRight - 8, Canvas::kTop + 20,
         "bias=" + fixed(ba.bias_mean, 3) + "  STD=" + fixed(ba.std, 3), "end", "annotation");
  c.text(Canvas::kWidth - Canvas::kRight - 8, Canvas::kTop + 38,
         "limits " + fixed(ba.lower_limit(), 3) + " / " + fixed(ba.upper_limit(), 3), "end", "annotation");
  return c.render(labels.title, labels.x, labels.y);
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << text;
  if (!out) throw RuntimeError("failed writing " + path.string());
}

}  // namespace mvl::plot
