#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "mvl/error.hpp"
#include "mvl/manifest.hpp"
#include "mvl/rng.hpp"
#include "mvl/study.hpp"

namespace mvl::synth {

struct IntRange {
  int lo = 0;
  int hi = 0;

  bool valid(int min_lo) const { return lo >= min_lo && lo <= hi; }
  friend bool operator==(const IntRange&, const IntRange&) = default;
};

/// Parameters of the procedural study generator. Score defaults follow the
/// published score distribution (share of zero scores, per-vessel maxima).
struct SynthConfig {
  int n_studies = 100;
  IntRange views_rca{1, 3};
  IntRange views_lca{3, 5};
  IntRange frames{20, 60};
  int height = 64;
  int width = 64;
  int frame_rate = 15;
  double zero_fraction_total = 0.52;
  double zero_fraction_rca = 0.883;
  double zero_fraction_lca = 0.65;
  double score_max_rca = 23.0;
  double score_max_lca = 61.0;
  /// Probability that a view of a diseased vessel shows its lesion.
  double view_informativeness = 0.6;
  /// Radius reduction at severity 1 (fraction of the lumen radius).
  double max_constriction_depth = 0.9;
  /// Lower bound of the severity of a diseased vessel.
  double min_severity = 0.5;
  /// Gaussian half-width of the lesion along the vessel, as a fraction of its length.
  double lesion_width = 0.2;
  /// Lumen radius as a fraction of the shorter frame side (+-10% per view).
  double vessel_radius = 0.05;
  /// Standard deviation of the additive pixel noise before normalization.
  double noise_sigma = 2.0;
  /// Largest in-plane rotation (radians) between the projections of a study.
  double max_view_rotation = 0.3;
  double left_dominance_fraction = 0.3;
  double bypass_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_studies <= 0) throw SchemaError("synth.n_studies must be positive");
    if (!views_rca.valid(0) || !views_lca.valid(0)) throw SchemaError("synth view ranges must be non-empty");
    if (views_rca.hi + views_lca.hi == 0 || (views_rca.lo + views_lca.lo) == 0) {
      throw SchemaError("synth studies need at least one view");
    }
    if (!frames.valid(1)) throw SchemaError("synth.frames range must be non-empty and >= 1");
    if (height < 16 || width < 16) throw SchemaError("synth frame size must be at least 16x16");
    if (frame_rate <= 0) throw SchemaError("synth.frame_rate must be positive");
    for (double p : {zero_fraction_total, zero_fraction_rca, zero_fraction_lca, view_informativeness,
                     max_constriction_depth, left_dominance_fraction, bypass_fraction}) {
      if (!(p >= 0.0 && p <= 1.0)) throw SchemaError("synth probabilities must lie in [0, 1]");
    }
    if (!(min_severity > 0.0 && min_severity <= 1.0)) throw SchemaError("synth.min_severity must lie in (0, 1]");
    if (!(lesion_width > 0.0 && lesion_width <= 0.5)) throw SchemaError("synth.lesion_width must lie in (0, 0.5]");
    if (!(vessel_radius > 0.0 && vessel_radius <= 0.2)) throw SchemaError("synth.vessel_radius must lie in (0, 0.2]");
    if (!(noise_sigma >= 0.0)) throw SchemaError("synth.noise_sigma must be non-negative");
    if (!(max_view_rotation >= 0.0)) throw SchemaError("synth.max_view_rotation must be non-negative");
    if (!(score_max_rca > 0.0) || !(score_max_lca > 0.0)) throw SchemaError("synth score maxima must be positive");
  }
};

/// Hidden per-vessel lesion severity in [0, 1].
struct SeverityLatent {
  double rca = 0.0;
  double lca = 0.0;

  double of(Vessel v) const { return v == Vessel::RCA ? rca : lca; }
};

inline double round1(double x) { return std::round(x * 10.0) / 10.0; }

/// Linear map severity -> score, rounded to one decimal.
inline double severity_to_score(double severity, Vessel vessel, const SynthConfig& cfg) {
  if (!(severity >= 0.0 && severity <= 1.0)) throw ValidationError("severity must lie in [0, 1]");
  const double max = vessel == Vessel::RCA ? cfg.score_max_rca : cfg.score_max_lca;
  return round1(severity * max);
}

inline std::uint64_t study_seed(const SynthConfig& cfg, int study_index) {
  return derive_seed(cfg.seed, static_cast<std::uint64_t>(study_index));
}

/// Conditional zero probabilities of each vessel given a nonzero total.
/// When the marginals cannot be met jointly (their conditional shares sum to
/// more than one), both are scaled down so that at least `kMinBothDiseased`
/// of nonzero studies have two diseased vessels.
inline constexpr double kMinBothDiseased = 0.05;

inline std::array<double, 2> conditional_zero_shares(const SynthConfig& cfg) {
  if (cfg.zero_fraction_total >= 1.0) return {0.0, 0.0};
  const double nz = 1.0 - cfg.zero_fraction_total;
  double a = std::clamp((cfg.zero_fraction_rca - cfg.zero_fraction_total) / nz, 0.0, 1.0);
  double b = std::clamp((cfg.zero_fraction_lca - cfg.zero_fraction_total) / nz, 0.0, 1.0);
  const double cap = 1.0 - kMinBothDiseased;
  if (a + b > cap) {
    const double s = cap / (a + b);
    a *= s;
    b *= s;
  }
  return {a, b};
}

struct StudyDraw {
  SeverityLatent severity;
  Labels labels;
};

/// Samples the latent severities and labels of one study.
inline StudyDraw sample_labels(const SynthConfig& cfg, int study_index) {
  Rng rng(derive_seed(study_seed(cfg, study_index), 0));
  StudyDraw d;
  const bool total_zero = rng.uniform() < cfg.zero_fraction_total;
  const double u = rng.uniform();
  const double sev_a = rng.uniform(cfg.min_severity, 1.0);
  const double sev_b = rng.uniform(cfg.min_severity, 1.0);
  if (!total_zero) {
    const auto [a, b] = conditional_zero_shares(cfg);
    if (u < a) {
      d.severity.lca = sev_b;
    } else if (u < a + b) {
      d.severity.rca = sev_a;
    } else {
      d.severity.rca = sev_a;
      d.severity.lca = sev_b;
    }
  }
  d.labels.syntax_rca = severity_to_score(d.severity.rca, Vessel::RCA, cfg);
  d.labels.syntax_lca = severity_to_score(d.severity.lca, Vessel::LCA, cfg);
  d.labels.syntax_total = round1(*d.labels.syntax_rca + *d.labels.syntax_lca);
  d.labels.dominance = rng.uniform() < cfg.left_dominance_fraction ? Dominance::left : Dominance::right;
  d.labels.bypass = rng.uniform() < cfg.bypass_fraction;
  return d;
}

// ---------------------------------------------------------------------------
// Rendering

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Everything needed to render one view deterministically.
struct ViewScene {
  std::size_t frames = 32;
  std::size_t height = 64;
  std::size_t width = 64;
  int frame_rate = 15;
  std::array<Point, 4> control{};  // cubic Bezier in pixel coordinates, at rest
  double base_radius = 3.0;
  double contrast = 110.0;
  double background = 170.0;
  double lesion_position = 0.5;  // curve parameter of the lesion centre
  double lesion_width = 0.07;
  double constriction = 0.0;     // radius reduction at the lesion centre, [0, 1)
  bool side_branch = false;      // unconstricted branch leaving the main vessel
  double side_branch_at = 0.35;
  double side_branch_angle = 0.8;
  bool distal_branch = false;    // extra branch at the distal end (right dominance marker)
  std::array<double, 4> bg_wave{};  // low-frequency background variation
  std::uint64_t noise_seed = 0;
  double noise_sigma = 6.0;
  double pulse_amplitude = 0.05;
  double pulse_period_s = 1.0;
};

inline Point bezier(const std::array<Point, 4>& c, double s) {
  const double u = 1.0 - s;
  const double b0 = u * u * u, b1 = 3 * u * u * s, b2 = 3 * u * s * s, b3 = s * s * s;
  return {b0 * c[0].x + b1 * c[1].x + b2 * c[2].x + b3 * c[3].x,
          b0 * c[0].y + b1 * c[1].y + b2 * c[2].y + b3 * c[3].y};
}

inline double pulse(const ViewScene& sc, std::size_t t) {
  const double phase = 2.0 * std::numbers::pi * static_cast<double>(t) /
                       (static_cast<double>(sc.frame_rate) * sc.pulse_period_s);
  return std::sin(phase);
}

/// Control points at frame t: periodic contraction towards the image centre.
inline std::array<Point, 4> control_at(const ViewScene& sc, std::size_t t) {
  const double k = 1.0 - sc.pulse_amplitude * pulse(sc, t);
  const double cx = 0.5 * static_cast<double>(sc.width), cy = 0.5 * static_cast<double>(sc.height);
  std::array<Point, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {cx + k * (sc.control[i].x - cx), cy + k * (sc.control[i].y - cy)};
  }
  return out;
}

/// Pixel position of the lesion centre at frame t.
inline Point lesion_center(const ViewScene& sc, std::size_t t) {
  return bezier(control_at(sc, t), sc.lesion_position);
}

namespace detail {

// Darkness of a tube segment: projected path length through a cylinder of
// radius r at distance d, relative to the nominal radius.
inline void splat_tube(std::vector<double>& dark, std::size_t h, std::size_t w, Point p, double r,
                       double nominal, double contrast) {
  if (r <= 0.0) return;
  const int x0 = std::max(0, static_cast<int>(std::floor(p.x - r - 1)));
  const int x1 = std::min(static_cast<int>(w) - 1, static_cast<int>(std::ceil(p.x + r + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(p.y - r - 1)));
  const int y1 = std::min(static_cast<int>(h) - 1, static_cast<int>(std::ceil(p.y + r + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - p.x, dy = y + 0.5 - p.y;
      const double q = r * r - (dx * dx + dy * dy);
      if (q <= 0.0) continue;
      const double v = contrast * std::sqrt(q) / nominal;
      double& cell = dark[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
      cell = std::max(cell, v);
    }
}

inline void draw_branch(std::vector<double>& dark, std::size_t h, std::size_t w, Point start, double angle,
                        double length, double radius, double nominal, double contrast) {
  const int steps = std::max(8, static_cast<int>(length * 3));
  for (int i = 0; i <= steps; ++i) {
    const double s = static_cast<double>(i) / steps;
    const Point p{start.x + s * length * std::cos(angle), start.y + s * length * std::sin(angle)};
    splat_tube(dark, h, w, p, radius * (1.0 - 0.4 * s), nominal, contrast);
  }
}

}  // namespace detail

/// Renders background noise plus a dark contrast-filled vessel that pulsates
/// periodically. The output is linearly stretched to span [0, 255].
inline Video render_view(const ViewScene& sc) {
  const std::size_t h = sc.height, w = sc.width;
  std::vector<double> img(sc.frames * h * w);
  Rng noise(sc.noise_seed);
  constexpr int kSamples = 240;
  std::vector<double> dark(h * w);
  for (std::size_t t = 0; t < sc.frames; ++t) {
    std::fill(dark.begin(), dark.end(), 0.0);
    const auto ctrl = control_at(sc, t);
    const double fill = std::min(1.0, 0.6 + 0.1 * static_cast<double>(t));  // contrast inflow
    const double contrast = sc.contrast * fill;
    const double pr = 1.0 + 0.5 * sc.pulse_amplitude * pulse(sc, t);
    for (int i = 0; i <= kSamples; ++i) {
      const double s = static_cast<double>(i) / kSamples;
      const double taper = sc.base_radius * pr * (1.0 - 0.3 * s);
      const double z = (s - sc.lesion_position) / sc.lesion_width;
      const double narrowing = 1.0 - sc.constriction * std::exp(-0.5 * z * z);
      detail::splat_tube(dark, h, w, bezier(ctrl, s), taper * narrowing, sc.base_radius, contrast);
    }
    if (sc.side_branch) {
      const Point a = bezier(ctrl, sc.side_branch_at);
      const Point b = bezier(ctrl, std::min(1.0, sc.side_branch_at + 0.01));
      const double heading = std::atan2(b.y - a.y, b.x - a.x) + sc.side_branch_angle;
      detail::draw_branch(dark, h, w, a, heading, 0.35 * static_cast<double>(std::min(h, w)),
                          0.6 * sc.base_radius * pr, sc.base_radius, contrast);
    }
    if (sc.distal_branch) {
      const Point a = bezier(ctrl, 0.85);
      const Point b = bezier(ctrl, 0.86);
      const double heading = std::atan2(b.y - a.y, b.x - a.x) - 1.0;
      detail::draw_branch(dark, h, w, a, heading, 0.3 * static_cast<double>(std::min(h, w)),
                          0.7 * sc.base_radius * pr, sc.base_radius, contrast);
    }
    double* frame = img.data() + t * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = static_cast<double>(x) / static_cast<double>(w);
        const double fy = static_cast<double>(y) / static_cast<double>(h);
        const double bg = sc.background + sc.bg_wave[0] * std::sin(2 * std::numbers::pi * (fx + sc.bg_wave[1])) +
                          sc.bg_wave[2] * std::cos(2 * std::numbers::pi * (fy + sc.bg_wave[3]));
        frame[y * w + x] = bg - dark[y * w + x] + noise.normal(0.0, sc.noise_sigma);
      }
  }
  const auto [mn, mx] = std::minmax_element(img.begin(), img.end());
  const double lo = *mn, span = std::max(1e-9, *mx - *mn);
  Video out(sc.frames, h, w);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (img[i] - lo) / span));
  }
  return out;
}

struct StudyGeometry {
  std::array<Point, 4> control{};  // normalized to the unit square
  double lesion_position = 0.5;
};

inline StudyGeometry sample_geometry(Rng& rng) {
  StudyGeometry g;
  const double y0 = rng.uniform(0.15, 0.85), y3 = rng.uniform(0.15, 0.85);
  g.control[0] = {0.05, y0};
  g.control[1] = {rng.uniform(0.25, 0.45), rng.uniform(0.05, 0.95)};
  g.control[2] = {rng.uniform(0.55, 0.75), rng.uniform(0.05, 0.95)};
  g.control[3] = {0.95, y3};
  g.lesion_position = rng.uniform(0.3, 0.7);
  return g;
}

/// Builds the scene of one view: the study geometry seen through a random
/// in-plane rotation and scaling (a different projection angle per view).
inline ViewScene make_scene(const SynthConfig& cfg, const StudyGeometry& geo, Rng& rng, std::size_t frames,
                            Vessel vessel, double severity, bool informative, bool right_dominant) {
  ViewScene sc;
  sc.frames = frames;
  sc.height = static_cast<std::size_t>(cfg.height);
  sc.width = static_cast<std::size_t>(cfg.width);
  sc.frame_rate = cfg.frame_rate;
  const double side = static_cast<double>(std::min(cfg.height, cfg.width));
  const double theta = rng.uniform(-cfg.max_view_rotation, cfg.max_view_rotation);
  const double scale = rng.uniform(0.85, 1.0);
  const bool flip = rng.bernoulli(0.5);
  const double cx = 0.5 * cfg.width, cy = 0.5 * cfg.height;
  for (std::size_t i = 0; i < 4; ++i) {
    double px = (geo.control[i].x - 0.5) * scale, py = (geo.control[i].y - 0.5) * scale;
    if (flip) py = -py;
    sc.control[i] = {cx + side * (px * std::cos(theta) - py * std::sin(theta)),
                     cy + side * (px * std::sin(theta) + py * std::cos(theta))};
  }
  sc.base_radius = side * cfg.vessel_radius * rng.uniform(0.9, 1.1);
  sc.contrast = rng.uniform(95.0, 125.0);
  sc.background = rng.uniform(150.0, 190.0);
  sc.lesion_position = geo.lesion_position;
  sc.lesion_width = cfg.lesion_width;
  sc.constriction = informative ? cfg.max_constriction_depth * severity : 0.0;
  sc.side_branch = vessel == Vessel::LCA;
  sc.side_branch_at = rng.uniform(0.15, 0.25);
  sc.side_branch_angle = rng.bernoulli(0.5) ? 0.8 : -0.8;
  sc.distal_branch = vessel == Vessel::RCA && right_dominant;
  sc.bg_wave = {rng.uniform(0.0, 12.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 12.0), rng.uniform(0.0, 1.0)};
  sc.noise_sigma = cfg.noise_sigma;
  sc.noise_seed = rng.next();
  return sc;
}

inline std::string study_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%05d", index);
  return buf;
}

/// Per-view informativeness flags for one vessel; a diseased vessel always
/// gets at least one informative view.
inline std::vector<bool> draw_informative(Rng& rng, std::size_t n_views, double severity, double p) {
  std::vector<bool> flags(n_views);
  bool any = false;
  for (std::size_t i = 0; i < n_views; ++i) {
    flags[i] = rng.uniform() < p;
    any = any || flags[i];
  }
  if (severity > 0.0 && n_views > 0 && !any) {
    flags[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n_views) - 1))] = true;
  }
  return flags;
}

struct GeneratedStudy {
  Study study;
  SeverityLatent severity;
  std::vector<bool> informative;  // per view, manifest order
};

inline GeneratedStudy gen_study_detailed(const SynthConfig& cfg, int study_index) {
  if (study_index < 0 || study_index >= cfg.n_studies) throw ValidationError("study_index out of range");
  const StudyDraw draw = sample_labels(cfg, study_index);
  Rng rng(derive_seed(study_seed(cfg, study_index), 1));
  const StudyGeometry geo = sample_geometry(rng);
  const int n_rca = static_cast<int>(rng.uniform_int(cfg.views_rca.lo, cfg.views_rca.hi));
  const int n_lca = static_cast<int>(rng.uniform_int(cfg.views_lca.lo, cfg.views_lca.hi));
  const auto inf_rca = draw_informative(rng, static_cast<std::size_t>(n_rca), draw.severity.rca,
                                        cfg.view_informativeness);
  const auto inf_lca = draw_informative(rng, static_cast<std::size_t>(n_lca), draw.severity.lca,
                                        cfg.view_informativeness);
  const bool right_dominant = draw.labels.dominance == Dominance::right;

  GeneratedStudy out;
  out.study.id = study_id(study_index);
  out.study.labels = draw.labels;
  out.severity = draw.severity;
  int view_index = 0;
  auto add = [&](Vessel vessel, bool informative) {
    Rng vr(derive_seed(study_seed(cfg, study_index), 2, static_cast<std::uint64_t>(view_index)));
    const auto frames = static_cast<std::size_t>(vr.uniform_int(cfg.frames.lo, cfg.frames.hi));
    const ViewScene sc = make_scene(cfg, geo, vr, frames, vessel, draw.severity.of(vessel), informative,
                                    right_dominant);
    View v;
    char name[48];
    std::snprintf(name, sizeof(name), "view_%02d_%s", view_index, to_string(vessel));
    v.id = out.study.id + "/" + name;
    v.vessel = vessel;
    v.frame_rate = cfg.frame_rate;
    v.video = render_view(sc);
    out.study.views.push_back(std::move(v));
    out.informative.push_back(informative);
    ++view_index;
  };
  for (int i = 0; i < n_rca; ++i) add(Vessel::RCA, inf_rca[static_cast<std::size_t>(i)]);
  for (int i = 0; i < n_lca; ++i) add(Vessel::LCA, inf_lca[static_cast<std::size_t>(i)]);
  return out;
}

inline Study gen_study(const SynthConfig& cfg, int study_index) {
  return gen_study_detailed(cfg, study_index).study;
}

/// Writes every study as PNG frame directories plus manifest.json under
/// out_dir, and returns the manifest.
inline Manifest gen_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw RuntimeError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  Manifest m;
  m.base_dir = out_dir;
  for (int i = 0; i < cfg.n_studies; ++i) {
    const Study s = gen_study(cfg, i);
    StudyRecord rec;
    rec.id = s.id;
    rec.labels = s.labels;
    for (const auto& v : s.views) {
      const std::string rel = "studies/" + v.id;
      write_view_frames(out_dir / rel, v.video);
      rec.views.push_back({v.vessel, rel, v.frame_rate});
    }
    m.studies.push_back(std::move(rec));
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

/// In-memory variant used by experiments that do not need files on disk.
inline std::vector<Study> gen_studies(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Study> out;
  out.reserve(static_cast<std::size_t>(cfg.n_studies));
  for (int i = 0; i < cfg.n_studies; ++i) out.push_back(gen_study(cfg, i));
  return out;
}

}  // namespace mvl::synth
