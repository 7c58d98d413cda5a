#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mvl/checkpoint.hpp"
#include "mvl/error.hpp"
#include "mvl/synth.hpp"
#include "mvl/trainer.hpp"

// Run configuration file. Every section is optional; absent fields keep the
// defaults shown by default_config_json().

namespace mvl {

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// SynthConfig <-> JSON

inline nlohmann::json to_json(const synth::IntRange& r) { return nlohmann::json::array({r.lo, r.hi}); }

inline synth::IntRange int_range_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer()) {
    throw SchemaError(where + " must be a [lo, hi] integer pair");
  }
  return {j[0].get<int>(), j[1].get<int>()};
}

inline nlohmann::json to_json(const synth::SynthConfig& c) {
  return {{"n_studies", c.n_studies},
          {"views_rca", to_json(c.views_rca)},
          {"views_lca", to_json(c.views_lca)},
          {"frames", to_json(c.frames)},
          {"height", c.height},
          {"width", c.width},
          {"frame_rate", c.frame_rate},
          {"zero_fraction_total", c.zero_fraction_total},
          {"zero_fraction_rca", c.zero_fraction_rca},
          {"zero_fraction_lca", c.zero_fraction_lca},
          {"score_max_rca", c.score_max_rca},
          {"score_max_lca", c.score_max_lca},
          {"view_informativeness", c.view_informativeness},
          {"max_constriction_depth", c.max_constriction_depth},
          {"min_severity", c.min_severity},
          {"lesion_width", c.lesion_width},
          {"vessel_radius", c.vessel_radius},
          {"noise_sigma", c.noise_sigma},
          {"max_view_rotation", c.max_view_rotation},
          {"left_dominance_fraction", c.left_dominance_fraction},
          {"bypass_fraction", c.bypass_fraction},
          {"seed", c.seed}};
}

inline synth::SynthConfig synth_config_from_json(const nlohmann::json& j, synth::SynthConfig base = {}) {
  using detail::read_opt;
  detail::check_keys(j,
                     {"n_studies", "views_rca", "views_lca", "frames", "height", "width", "frame_rate",
                      "zero_fraction_total", "zero_fraction_rca", "zero_fraction_lca", "score_max_rca",
                      "score_max_lca", "view_informativeness", "max_constriction_depth", "min_severity",
                      "lesion_width", "vessel_radius", "noise_sigma", "max_view_rotation",
                      "left_dominance_fraction", "bypass_fraction", "seed"},
                     "synth");
  read_opt(j, "n_studies", base.n_studies, "synth");
  if (j.contains("views_rca")) base.views_rca = int_range_from_json(j.at("views_rca"), "synth.views_rca");
  if (j.contains("views_lca")) base.views_lca = int_range_from_json(j.at("views_lca"), "synth.views_lca");
  if (j.contains("frames")) base.frames = int_range_from_json(j.at("frames"), "synth.frames");
  read_opt(j, "height", base.height, "synth");
  read_opt(j, "width", base.width, "synth");
  read_opt(j, "frame_rate", base.frame_rate, "synth");
  read_opt(j, "zero_fraction_total", base.zero_fraction_total, "synth");
  read_opt(j, "zero_fraction_rca", base.zero_fraction_rca, "synth");
  read_opt(j, "zero_fraction_lca", base.zero_fraction_lca, "synth");
  read_opt(j, "score_max_rca", base.score_max_rca, "synth");
  read_opt(j, "score_max_lca", base.score_max_lca, "synth");
  read_opt(j, "view_informativeness", base.view_informativeness, "synth");
  read_opt(j, "max_constriction_depth", base.max_constriction_depth, "synth");
  read_opt(j, "min_severity", base.min_severity, "synth");
  read_opt(j, "lesion_width", base.lesion_width, "synth");
  read_opt(j, "vessel_radius", base.vessel_radius, "synth");
  read_opt(j, "noise_sigma", base.noise_sigma, "synth");
  read_opt(j, "max_view_rotation", base.max_view_rotation, "synth");
  read_opt(j, "left_dominance_fraction", base.left_dominance_fraction, "synth");
  read_opt(j, "bypass_fraction", base.bypass_fraction, "synth");
  read_opt(j, "seed", base.seed, "synth");
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// RunConfig

enum class Subset { all, nonzero };

inline Subset subset_from_string(const std::string& s) {
  if (s == "all") return Subset::all;
  if (s == "nonzero") return Subset::nonzero;
  throw SchemaError("subset must be \"all\" or \"nonzero\"");
}

inline std::string to_string(Subset s) { return s == Subset::all ? "all" : "nonzero"; }

struct EvalOptions {
  Subset subset = Subset::all;
  bool domain_shift = false;
  std::string external_manifest;  // manifest evaluated in domain-shift mode
};

struct RunConfig {
  std::string manifest;
  std::string output_dir = "run";
  std::uint64_t seed = 0;
  Task task = Task::syntax;
  bool cross_validation = true;
  std::size_t folds = 5;
  double test_fraction = 0.2;  // held-out share when cross-validation is off
  bool allow_label_mismatch = false;
  ModelConfig rca = default_model(Vessel::RCA);
  ModelConfig lca = default_model(Vessel::LCA);
  TrainConfig train;
  EvalOptions eval;
  synth::SynthConfig synth;

  static ModelConfig default_model(Vessel v) {
    ModelConfig m;
    m.vessel = v;
    return m;
  }

  /// Propagates the run seed and task into the sections that consume them.
  void resolve() {
    train.seed = seed;
    synth.seed = seed;
    rca.task = task;
    lca.task = Task::syntax;
    validate();
  }

  void validate() const {
    if (rca.vessel != Vessel::RCA) throw SchemaError("models.rca.vessel must be RCA");
    if (lca.vessel != Vessel::LCA) throw SchemaError("models.lca.vessel must be LCA");
    rca.validate();
    lca.validate();
    train.validate();
    synth.validate();
    if (cross_validation && folds < 2) throw SchemaError("cv.folds must be at least 2");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw SchemaError("cv.test_fraction must lie in (0, 1)");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"manifest", c.manifest},
          {"output_dir", c.output_dir},
          {"seed", c.seed},
          {"task", to_string(c.task)},
          {"cv", {{"enabled", c.cross_validation}, {"folds", c.folds}, {"test_fraction", c.test_fraction}}},
          {"allow_label_mismatch", c.allow_label_mismatch},
          {"models", {{"rca", to_json(c.rca)}, {"lca", to_json(c.lca)}}},
          {"train", to_json(c.train)},
          {"eval",
           {{"subset", to_string(c.eval.subset)},
            {"domain_shift", c.eval.domain_shift},
            {"external_manifest", c.eval.external_manifest}}},
          {"synth", to_json(c.synth)}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  using detail::read_opt;
  detail::check_keys(j,
                     {"manifest", "output_dir", "seed", "task", "cv", "allow_label_mismatch", "models", "train",
                      "eval", "synth"},
                     "config");
  read_opt(j, "manifest", base.manifest, "config");
  read_opt(j, "output_dir", base.output_dir, "config");
  read_opt(j, "seed", base.seed, "config");
  if (j.contains("task")) {
    std::string s;
    read_opt(j, "task", s, "config");
    base.task = task_from_string(s);
  }
  if (auto it = j.find("cv"); it != j.end()) {
    detail::check_keys(*it, {"enabled", "folds", "test_fraction"}, "config.cv");
    read_opt(*it, "enabled", base.cross_validation, "config.cv");
    read_opt(*it, "folds", base.folds, "config.cv");
    read_opt(*it, "test_fraction", base.test_fraction, "config.cv");
  }
  read_opt(j, "allow_label_mismatch", base.allow_label_mismatch, "config");
  if (auto it = j.find("models"); it != j.end()) {
    detail::check_keys(*it, {"rca", "lca"}, "config.models");
    if (it->contains("rca")) base.rca = model_config_from_json(it->at("rca"), base.rca);
    if (it->contains("lca")) base.lca = model_config_from_json(it->at("lca"), base.lca);
  }
  if (j.contains("train")) base.train = train_config_from_json(j.at("train"), base.train);
  if (auto it = j.find("eval"); it != j.end()) {
    detail::check_keys(*it, {"subset", "domain_shift", "external_manifest"}, "config.eval");
    if (it->contains("subset")) {
      std::string s;
      read_opt(*it, "subset", s, "config.eval");
      base.eval.subset = subset_from_string(s);
    }
    read_opt(*it, "domain_shift", base.eval.domain_shift, "config.eval");
    read_opt(*it, "external_manifest", base.eval.external_manifest, "config.eval");
  }
  if (j.contains("synth")) base.synth = synth_config_from_json(j.at("synth"), base.synth);
  base.validate();
  return base;
}

inline nlohmann::json default_config_json() { return to_json(RunConfig{}); }

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_json_file(path));
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw RuntimeError("failed writing " + path.string());
}

}  // namespace mvl
