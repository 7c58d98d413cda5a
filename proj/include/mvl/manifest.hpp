#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mvl/error.hpp"
#include "mvl/png_io.hpp"
#include "mvl/study.hpp"

namespace mvl {

namespace fs = std::filesystem;

struct ViewRef {
  Vessel vessel = Vessel::LCA;
  std::string path;  // frame directory, relative to the manifest unless absolute
  int frame_rate = 15;

  friend bool operator==(const ViewRef&, const ViewRef&) = default;
};

struct StudyRecord {
  std::string id;
  std::vector<ViewRef> views;
  Labels labels;

  friend bool operator==(const StudyRecord&, const StudyRecord&) = default;
};

struct Manifest {
  int version = 1;
  std::vector<StudyRecord> studies;
  fs::path base_dir;  // directory the manifest was loaded from; not serialized
};

struct ManifestLoadOptions {
  /// Keep per-vessel scores and recompute the total when it disagrees.
  bool allow_label_mismatch = false;
  /// Check that every view directory holds at least frame_0000.png.
  bool check_paths = true;
};

inline std::string frame_filename(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04zu.png", index);
  return buf;
}

inline fs::path resolve_view_path(const Manifest& m, const ViewRef& v) {
  const fs::path p(v.path);
  return p.is_absolute() ? p : m.base_dir / p;
}

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

using nlohmann::json;

inline const json& require(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(where + ": missing field \"" + key + "\"");
  return *it;
}

inline void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [k, _] : obj.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw SchemaError(where + ": unknown field \"" + k + "\"");
  }
}

inline std::optional<double> nullable_number(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (v.is_null()) return std::nullopt;
  if (!v.is_number()) throw SchemaError(where + "." + key + " must be a number or null");
  return v.get<double>();
}

inline json labels_to_json(const Labels& l) {
  auto num = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j = json::object();
  j["syntax_total"] = num(l.syntax_total);
  j["syntax_rca"] = num(l.syntax_rca);
  j["syntax_lca"] = num(l.syntax_lca);
  j["dominance"] = l.dominance ? json(to_string(*l.dominance)) : json(nullptr);
  j["bypass"] = l.bypass;
  return j;
}

inline Labels labels_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + " must be an object");
  reject_unknown(j, {"syntax_total", "syntax_rca", "syntax_lca", "dominance", "bypass"}, where);
  Labels l;
  l.syntax_total = nullable_number(j, "syntax_total", where);
  l.syntax_rca = nullable_number(j, "syntax_rca", where);
  l.syntax_lca = nullable_number(j, "syntax_lca", where);
  const json& dom = require(j, "dominance", where);
  if (dom.is_string() && dom == "left") {
    l.dominance = Dominance::left;
  } else if (dom.is_string() && dom == "right") {
    l.dominance = Dominance::right;
  } else if (!dom.is_null()) {
    throw SchemaError(where + ".dominance must be \"left\", \"right\" or null");
  }
  const json& bypass = require(j, "bypass", where);
  if (!bypass.is_boolean()) throw SchemaError(where + ".bypass must be a boolean");
  l.bypass = bypass.get<bool>();
  return l;
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const Manifest& m) {
  using nlohmann::json;
  json studies = json::array();
  for (const auto& s : m.studies) {
    json views = json::array();
    for (const auto& v : s.views) {
      views.push_back({{"vessel", to_string(v.vessel)}, {"path", v.path}, {"frame_rate", v.frame_rate}});
    }
    studies.push_back({{"id", s.id}, {"views", std::move(views)}, {"labels", detail::labels_to_json(s.labels)}});
  }
  return {{"version", m.version}, {"studies", std::move(studies)}};
}

/// Canonical text: keys sorted, two-space indent, shortest round-trip doubles.
inline std::string manifest_to_string(const Manifest& m) { return manifest_to_json(m).dump(2) + "\n"; }

inline Manifest manifest_from_json(const nlohmann::json& j, const ManifestLoadOptions& opts = {}) {
  using nlohmann::json;
  if (!j.is_object()) throw SchemaError("manifest must be a JSON object");
  detail::reject_unknown(j, {"version", "studies"}, "manifest");
  const json& version = detail::require(j, "version", "manifest");
  if (!version.is_number_integer() || version.get<int>() != 1) throw SchemaError("manifest version must be 1");
  const json& studies = detail::require(j, "studies", "manifest");
  if (!studies.is_array()) throw SchemaError("manifest.studies must be an array");

  Manifest m;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const json& s = studies[i];
    const std::string where = "studies[" + std::to_string(i) + "]";
    if (!s.is_object()) throw SchemaError(where + " must be an object");
    detail::reject_unknown(s, {"id", "views", "labels"}, where);
    StudyRecord rec;
    const json& id = detail::require(s, "id", where);
    if (!id.is_string()) throw SchemaError(where + ".id must be a string");
    rec.id = id.get<std::string>();
    const json& views = detail::require(s, "views", where);
    if (!views.is_array()) throw SchemaError(where + ".views must be an array");
    for (std::size_t k = 0; k < views.size(); ++k) {
      const json& v = views[k];
      const std::string vw = where + ".views[" + std::to_string(k) + "]";
      if (!v.is_object()) throw SchemaError(vw + " must be an object");
      detail::reject_unknown(v, {"vessel", "path", "frame_rate"}, vw);
      const json& vessel = detail::require(v, "vessel", vw);
      const json& path = detail::require(v, "path", vw);
      const json& fr = detail::require(v, "frame_rate", vw);
      if (!vessel.is_string()) throw SchemaError(vw + ".vessel must be a string");
      if (!path.is_string()) throw SchemaError(vw + ".path must be a string");
      if (!fr.is_number_integer() || fr.get<long long>() <= 0) {
        throw SchemaError(vw + ".frame_rate must be a positive integer");
      }
      rec.views.push_back({vessel_from_string(vessel.get<std::string>()), path.get<std::string>(), fr.get<int>()});
    }
    rec.labels = detail::labels_from_json(detail::require(s, "labels", where), where + ".labels");

    if (!seen.insert(rec.id).second) throw ValidationError("duplicate study_id \"" + rec.id + "\"");
    if (!labels_consistent(rec.labels)) {
      if (!opts.allow_label_mismatch) {
        throw ValidationError("label inconsistency in study \"" + rec.id +
                              "\": syntax_total != syntax_rca + syntax_lca");
      }
      spdlog::warn("study \"{}\": syntax_total {} replaced by syntax_rca + syntax_lca = {}", rec.id,
                   *rec.labels.syntax_total, *rec.labels.syntax_rca + *rec.labels.syntax_lca);
      rec.labels.syntax_total = *rec.labels.syntax_rca + *rec.labels.syntax_lca;
    }
    ValidationReport report;
    std::size_t n_rca = 0, n_lca = 0;
    for (const auto& v : rec.views) (v.vessel == Vessel::RCA ? n_rca : n_lca)++;
    validate_labels_and_counts(rec.labels, n_rca, n_lca, report);
    if (!report.ok()) throw ValidationError("study \"" + rec.id + "\": " + report.violations.front());
    m.studies.push_back(std::move(rec));
  }
  return m;
}

inline Manifest load_manifest(const fs::path& path, const ManifestLoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("manifest is not valid JSON: ") + e.what());
  }
  Manifest m = manifest_from_json(j, opts);
  m.base_dir = path.parent_path();
  if (opts.check_paths) {
    for (const auto& s : m.studies)
      for (const auto& v : s.views) {
        const fs::path dir = resolve_view_path(m, v);
        if (!fs::is_regular_file(dir / frame_filename(0))) {
          throw ValidationError("unresolvable view path \"" + v.path + "\" in study \"" + s.id + "\"");
        }
      }
  }
  return m;
}

inline void save_manifest(const Manifest& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write manifest " + path.string());
  out << manifest_to_string(m);
  if (!out) throw RuntimeError("failed writing manifest " + path.string());
}

// ---------------------------------------------------------------------------
// Frame directories

inline void write_view_frames(const fs::path& dir, const Video& video) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < video.frames; ++t) {
    write_png_gray(dir / frame_filename(t), video.width, video.height, video.frame(t));
  }
}

inline Video read_view_frames(const fs::path& dir) {
  Video v;
  for (std::size_t t = 0;; ++t) {
    const fs::path f = dir / frame_filename(t);
    if (!fs::is_regular_file(f)) break;
    GrayImage img = read_png_gray(f);
    if (t == 0) {
      v.height = img.height;
      v.width = img.width;
    } else if (img.height != v.height || img.width != v.width) {
      throw ValidationError("frame size changes within view " + dir.string());
    }
    v.pixels.insert(v.pixels.end(), img.pixels.begin(), img.pixels.end());
    v.frames = t + 1;
  }
  if (v.frames == 0) throw ValidationError("no frames found in " + dir.string());
  return v;
}

/// Reads the pixel data of one study and checks it with validate_study.
inline Study load_study(const Manifest& m, const StudyRecord& rec) {
  Study s;
  s.id = rec.id;
  s.labels = rec.labels;
  for (const auto& ref : rec.views) {
    View v;
    v.id = ref.path;
    v.vessel = ref.vessel;
    v.frame_rate = ref.frame_rate;
    v.video = read_view_frames(resolve_view_path(m, ref));
    s.views.push_back(std::move(v));
  }
  const ValidationReport report = validate_study(s);
  if (!report.ok()) throw ValidationError("study \"" + s.id + "\": " + report.violations.front());
  return s;
}

inline std::vector<Study> load_studies(const Manifest& m) {
  std::vector<Study> out;
  out.reserve(m.studies.size());
  for (const auto& rec : m.studies) out.push_back(load_study(m, rec));
  return out;
}

}  // namespace mvl
