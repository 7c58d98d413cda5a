#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvl/error.hpp"

namespace mvl {

enum class Vessel { RCA, LCA };

inline const char* to_string(Vessel v) { return v == Vessel::RCA ? "RCA" : "LCA"; }

inline Vessel vessel_from_string(const std::string& s) {
  if (s == "RCA") return Vessel::RCA;
  if (s == "LCA") return Vessel::LCA;
  throw SchemaError("vessel must be \"RCA\" or \"LCA\", got \"" + s + "\"");
}

enum class Dominance { left, right };

inline const char* to_string(Dominance d) { return d == Dominance::left ? "left" : "right"; }

/// Grayscale clip, frames x height x width, 8 bits per pixel.
struct Video {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  Video() = default;
  Video(std::size_t t, std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : frames(t), height(h), width(w), pixels(t * h * w, fill) {}

  std::uint8_t at(std::size_t t, std::size_t y, std::size_t x) const {
    return pixels[(t * height + y) * width + x];
  }
  std::uint8_t& at(std::size_t t, std::size_t y, std::size_t x) {
    return pixels[(t * height + y) * width + x];
  }
  const std::uint8_t* frame(std::size_t t) const { return pixels.data() + t * height * width; }

  friend bool operator==(const Video&, const Video&) = default;
};

struct View {
  std::string id;
  Vessel vessel = Vessel::LCA;
  Video video;
  int frame_rate = 15;
};

struct Labels {
  std::optional<double> syntax_total;
  std::optional<double> syntax_rca;
  std::optional<double> syntax_lca;
  std::optional<Dominance> dominance;
  bool bypass = false;

  std::optional<double> score(Vessel v) const { return v == Vessel::RCA ? syntax_rca : syntax_lca; }

  bool has_all_scores() const { return syntax_total && syntax_rca && syntax_lca; }

  friend bool operator==(const Labels&, const Labels&) = default;
};

/// Scores are written with one decimal; the sum check tolerates the binary
/// rounding of decimal fractions (3.1 + 7.2 != 10.3 in doubles).
inline constexpr double kLabelSumTolerance = 1e-6;

inline bool labels_consistent(const Labels& l) {
  if (!l.has_all_scores()) return true;
  return std::abs(*l.syntax_total - (*l.syntax_rca + *l.syntax_lca)) <= kLabelSumTolerance;
}

struct Study {
  std::string id;
  std::vector<View> views;
  Labels labels;
};

struct ValidationReport {
  std::vector<std::string> violations;
  std::vector<std::string> warnings;

  bool ok() const { return violations.empty(); }
};

/// Typical acquisition ranges; deviations are warnings only.
inline constexpr std::size_t kTypicalFramesMin = 20;
inline constexpr std::size_t kTypicalFramesMax = 60;
inline constexpr std::size_t kTypicalRcaViewsMin = 1;
inline constexpr std::size_t kTypicalRcaViewsMax = 3;
inline constexpr std::size_t kTypicalLcaViewsMin = 3;
inline constexpr std::size_t kTypicalLcaViewsMax = 5;
inline constexpr std::size_t kMinFrameSide = 16;

/// Checks on labels and view counts; needs no pixel data.
inline void validate_labels_and_counts(const Labels& labels, std::size_t n_rca, std::size_t n_lca,
                                       ValidationReport& report) {
  for (const auto& s : {labels.syntax_total, labels.syntax_rca, labels.syntax_lca}) {
    if (s && (*s < 0.0 || !std::isfinite(*s))) {
      report.violations.emplace_back("negative score");
      break;
    }
  }
  if (!labels_consistent(labels)) {
    report.violations.emplace_back("label inconsistency: syntax_total != syntax_rca + syntax_lca");
  }
  if (n_rca + n_lca == 0) {
    report.violations.emplace_back("empty views");
    return;
  }
  if (n_rca < kTypicalRcaViewsMin || n_rca > kTypicalRcaViewsMax) {
    report.warnings.emplace_back("RCA view count " + std::to_string(n_rca) + " outside typical 1-3 range");
  }
  if (n_lca < kTypicalLcaViewsMin || n_lca > kTypicalLcaViewsMax) {
    report.warnings.emplace_back("LCA view count " + std::to_string(n_lca) + " outside typical 3-5 range");
  }
}

inline ValidationReport validate_study(const Study& study) {
  ValidationReport report;
  std::size_t n_rca = 0, n_lca = 0;
  for (const auto& v : study.views) (v.vessel == Vessel::RCA ? n_rca : n_lca)++;
  validate_labels_and_counts(study.labels, n_rca, n_lca, report);
  for (std::size_t i = 0; i < study.views.size(); ++i) {
    const auto& v = study.views[i];
    const std::string tag = "view " + std::to_string(i) + ": ";
    if (v.video.frames == 0) {
      report.violations.emplace_back(tag + "empty view (no frames)");
      continue;
    }
    if (v.video.pixels.size() != v.video.frames * v.video.height * v.video.width) {
      report.violations.emplace_back(tag + "pixel buffer does not match frame dimensions");
    }
    if (v.video.height < kMinFrameSide || v.video.width < kMinFrameSide) {
      report.violations.emplace_back(tag + "frame size below 16x16");
    }
    if (v.frame_rate <= 0) report.violations.emplace_back(tag + "non-positive frame rate");
    if (v.video.frames < kTypicalFramesMin) {
      report.warnings.emplace_back(tag + "frame count below typical 20-60 range");
    } else if (v.video.frames > kTypicalFramesMax) {
      report.warnings.emplace_back(tag + "frame count above typical 20-60 range");
    }
  }
  return report;
}

/// Views of one vessel in manifest order.
inline std::vector<const View*> views_by_vessel(const Study& study, Vessel vessel) {
  std::vector<const View*> out;
  for (const auto& v : study.views)
    if (v.vessel == vessel) out.push_back(&v);
  return out;
}

}  // namespace mvl
