// Command-line front end: synth, train, eval, agreement, plot.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mvl/checkpoint.hpp"
#include "mvl/config.hpp"
#include "mvl/csv.hpp"
#include "mvl/manifest.hpp"
#include "mvl/metrics.hpp"
#include "mvl/plot.hpp"
#include "mvl/synth.hpp"
#include "mvl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace mvl;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<std::string> subset;
  std::optional<std::string> manifest;
  std::optional<std::string> output;
  std::optional<std::string> external_manifest;
  bool no_cv = false;
  bool domain_shift = false;
  bool allow_label_mismatch = false;
};

RunConfig resolve_config(const Overrides& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.task) cfg.task = task_from_string(*o.task);
  if (o.subset) cfg.eval.subset = subset_from_string(*o.subset);
  if (o.manifest) cfg.manifest = *o.manifest;
  if (o.output) cfg.output_dir = *o.output;
  if (o.external_manifest) cfg.eval.external_manifest = *o.external_manifest;
  if (o.no_cv) cfg.cross_validation = false;
  if (o.domain_shift) cfg.eval.domain_shift = true;
  if (o.allow_label_mismatch) cfg.allow_label_mismatch = true;
  if (cfg.task == Task::dominance) cfg.rca.task = Task::dominance;
  cfg.resolve();
  return cfg;
}

json provenance(const RunConfig& cfg) {
  return {{"tool", "mvl"}, {"tool_version", kToolVersion}, {"seed", cfg.seed}, {"config", to_json(cfg)}};
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const Overrides& o, const std::string& out_dir) {
  RunConfig cfg = resolve_config(o);
  const Manifest m = synth::gen_dataset(cfg.synth, out_dir);
  std::size_t zero = 0, rca = 0, lca = 0;
  for (const auto& s : m.studies) {
    if (s.labels.syntax_total && *s.labels.syntax_total == 0.0) ++zero;
    for (const auto& v : s.views) (v.vessel == Vessel::RCA ? rca : lca)++;
  }
  const double n = static_cast<double>(m.studies.size());
  json summary = {{"studies", m.studies.size()},
                  {"zero_total_share", static_cast<double>(zero) / n},
                  {"views_rca", rca},
                  {"views_lca", lca},
                  {"mean_views_rca", static_cast<double>(rca) / n},
                  {"mean_views_lca", static_cast<double>(lca) / n}};
  json meta = provenance(cfg);
  meta["summary"] = summary;
  write_json_file(fs::path(out_dir) / "synth_run.json", meta);
  std::printf("studies: %zu\n", m.studies.size());
  std::printf("zero total share: %.3f\n", static_cast<double>(zero) / n);
  std::printf("views: RCA %zu (mean %.2f), LCA %zu (mean %.2f)\n", rca, static_cast<double>(rca) / n, lca,
              static_cast<double>(lca) / n);
  std::printf("manifest: %s\n", (fs::path(out_dir) / "manifest.json").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

std::vector<Study> load_labeled(const std::string& manifest, bool allow_mismatch) {
  if (manifest.empty()) throw SchemaError("config.manifest is required");
  ManifestLoadOptions opts;
  opts.allow_label_mismatch = allow_mismatch;
  return load_studies(load_manifest(manifest, opts));
}

json lr_traces(const std::vector<std::vector<BranchResult>>& per_fold) {
  json out = json::object();
  for (std::size_t f = 0; f < per_fold.size(); ++f) {
    for (const auto& b : per_fold[f]) {
      for (const auto& h : b.stages) {
        out[to_string(b.vessel)]["fold" + std::to_string(f)]["stage" + std::to_string(h.stage)] = h.lr_trace;
      }
    }
  }
  return out;
}

int cmd_train(const Overrides& o, int stage) {
  RunConfig cfg = resolve_config(o);
  const auto studies = load_labeled(cfg.manifest, cfg.allow_label_mismatch);
  const fs::path run(cfg.output_dir);
  fs::create_directories(run);
  write_json_file(run / "config.json", provenance(cfg));
  json meta = provenance(cfg);
  meta["stage"] = stage == 0 ? json("all") : json(stage);

  if (cfg.task == Task::syntax) {
    const auto ids = labeled_ids(studies);
    std::vector<Split> splits;
    std::optional<FoldPlan> plan;
    if (cfg.cross_validation) {
      plan = make_folds(ids, cfg.folds, cfg.seed);
      splits = fold_splits(*plan);
    } else {
      splits = {holdout_split(ids, cfg.test_fraction, cfg.seed)};
    }
    CvResult res = run_splits<float>(studies, splits, cfg.rca, cfg.lca, cfg.train, run, stage);
    res.plan = plan;
    std::vector<std::vector<BranchResult>> branches;
    std::vector<metrics::PredictionRecord> preds;
    for (const auto& f : res.folds) {
      branches.push_back(f.branches);
      preds.insert(preds.end(), f.predictions.begin(), f.predictions.end());
    }
    // Single-stage runs extend the traces recorded by earlier stages.
    json traces = json::object();
    json hist = json::array();
    if (stage > 1 && fs::exists(run / "run.json")) {
      const json prev = read_json_file(run / "run.json");
      traces = prev.value("lr_trace", json::object());
      hist = prev.value("history", json::array());
    }
    traces.merge_patch(lr_traces(branches));
    meta["lr_trace"] = traces;
    for (const auto& b : branches)
      for (const auto& br : b) hist.push_back(to_json(br));
    meta["history"] = hist;
    write_json_file(run / "run.json", meta);
    write_json_file(run / "report.json", to_json(res));
    if (!preds.empty()) write_predictions_csv(run / "predictions.csv", preds);
    for (const auto& f : res.folds) {
      if (!f.evaluated) continue;
      std::printf("fold %zu: R2 %s, accuracy %.3f\n", f.fold, plot::r2_label(f.report.all.regression.r2).c_str(),
                  f.report.all.classification ? f.report.all.classification->accuracy : 0.0);
    }
  } else {
    const auto ids = dominance_ids(studies);
    std::vector<Split> splits;
    std::optional<FoldPlan> plan;
    if (cfg.cross_validation) {
      plan = make_folds(ids, cfg.folds, cfg.seed);
      splits = fold_splits(*plan);
    } else {
      splits = {holdout_split(ids, cfg.test_fraction, cfg.seed)};
    }
    DominanceCvResult res = run_dominance_splits<float>(studies, splits, cfg.rca, cfg.train, run, stage);
    res.plan = plan;
    write_json_file(run / "run.json", meta);
    write_json_file(run / "report.json", to_json(res));
    for (std::size_t f = 0; f < res.reports.size(); ++f) {
      std::printf("fold %zu: accuracy %.3f\n", f, res.reports[f].accuracy);
    }
  }
  std::printf("run directory: %s\n", run.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct FoldModels {
  std::size_t fold = 0;
  std::optional<Checkpoint<float>> rca;
  std::optional<Checkpoint<float>> lca;
  std::vector<std::string> test_ids;
};

std::vector<FoldModels> load_fold_models(const fs::path& run, Task task) {
  std::vector<FoldModels> out;
  for (std::size_t f = 0;; ++f) {
    const CheckpointPlan plan{run, f};
    const fs::path rca = plan.branch_dir(Vessel::RCA) / "model.ckpt";
    const fs::path lca = plan.branch_dir(Vessel::LCA) / "model.ckpt";
    if (!fs::exists(rca) && !fs::exists(lca)) break;
    FoldModels fm;
    fm.fold = f;
    fm.rca = load_checkpoint<float>(rca);
    if (fm.rca->model.config().task != task) {
      throw ValidationError("checkpoint " + rca.string() + " was trained for task " +
                            to_string(fm.rca->model.config().task));
    }
    if (task == Task::syntax) fm.lca = load_checkpoint<float>(lca);
    if (auto it = fm.rca->metadata.find("test_ids"); it != fm.rca->metadata.end()) {
      fm.test_ids = it->get<std::vector<std::string>>();
    }
    out.push_back(std::move(fm));
  }
  if (out.empty()) throw ValidationError("no fold models (model.ckpt) found under " + run.string());
  return out;
}

StudyPredictor<float> predictor_of(const FoldModels& fm) {
  const double tau = fm.rca->nonzero_threshold.value_or(fm.lca->nonzero_threshold.value_or(kDefaultThreshold));
  return {fm.rca->model, fm.lca->model, tau};
}

std::vector<metrics::PredictionRecord> restrict(const std::vector<metrics::PredictionRecord>& recs, Subset subset) {
  if (subset == Subset::all) return recs;
  std::vector<metrics::PredictionRecord> out;
  for (const auto& r : recs)
    if (metrics::gt_nonzero(r)) out.push_back(r);
  return out;
}

json report_json(const std::vector<metrics::PredictionRecord>& recs) {
  try {
    return metrics::to_json(metrics::evaluate(recs));
  } catch (const UndefinedMetric& e) {
    return {{"error", e.what()}, {"n", recs.size()}};
  }
}

json aggregate_json(const std::vector<std::vector<metrics::PredictionRecord>>& per_model) {
  std::vector<metrics::EvalReport> reps;
  for (const auto& recs : per_model) {
    try {
      reps.push_back(metrics::evaluate(recs));
    } catch (const UndefinedMetric&) {
    }
  }
  if (reps.size() < 2) return json();
  return metrics::to_json(metrics::cross_val_aggregate(reps));
}

int eval_syntax(const RunConfig& cfg, const fs::path& run, const fs::path& out) {
  const auto folds = load_fold_models(run, Task::syntax);
  json metrics_out = {{"task", "syntax"}, {"subset", to_string(cfg.eval.subset)}, {"checkpoints", run.string()}};
  std::vector<std::vector<metrics::PredictionRecord>> per_model;
  std::vector<metrics::PredictionRecord> all_preds;

  if (cfg.eval.domain_shift) {
    const std::string external = cfg.eval.external_manifest.empty() ? cfg.manifest : cfg.eval.external_manifest;
    const auto studies = load_labeled(external, cfg.allow_label_mismatch);
    std::vector<const Study*> ptrs;
    for (const auto& s : studies) ptrs.push_back(&s);
    for (const auto& fm : folds) {
      auto recs = restrict(predict_records(ptrs, predictor_of(fm)), cfg.eval.subset);
      write_predictions_csv(out / ("predictions_fold" + std::to_string(fm.fold) + ".csv"), recs);
      per_model.push_back(std::move(recs));
    }
    // Ensemble: mean of the per-model vessel scores, mean threshold.
    double tau = 0.0;
    for (const auto& fm : folds) tau += predictor_of(fm).nonzero_threshold;
    tau /= static_cast<double>(folds.size());
    for (std::size_t i = 0; i < per_model.front().size(); ++i) {
      metrics::PredictionRecord r = per_model.front()[i];
      r.pred_rca = r.pred_lca = 0.0;
      for (const auto& recs : per_model) {
        r.pred_rca += recs[i].pred_rca;
        r.pred_lca += recs[i].pred_lca;
      }
      r.pred_rca /= static_cast<double>(per_model.size());
      r.pred_lca /= static_cast<double>(per_model.size());
      r.pred_total = r.pred_rca + r.pred_lca;
      r.pred_nonzero = r.pred_total > tau;
      all_preds.push_back(r);
    }
    metrics_out["mode"] = "domain_shift";
    metrics_out["manifest"] = external;
    json models = json::array();
    for (std::size_t i = 0; i < per_model.size(); ++i) {
      json j = report_json(per_model[i]);
      j["fold"] = folds[i].fold;
      models.push_back(j);
    }
    metrics_out["models"] = models;
    metrics_out["aggregate"] = aggregate_json(per_model);
    metrics_out["ensemble"] = report_json(all_preds);
  } else {
    const auto studies = load_labeled(cfg.manifest, cfg.allow_label_mismatch);
    json fold_reports = json::array();
    for (const auto& fm : folds) {
      std::vector<std::string> ids = fm.test_ids;
      if (ids.empty()) {
        for (const auto& s : studies) ids.push_back(s.id);
      }
      auto recs = restrict(predict_records(select(studies, ids), predictor_of(fm)), cfg.eval.subset);
      json j = report_json(recs);
      j["fold"] = fm.fold;
      fold_reports.push_back(j);
      all_preds.insert(all_preds.end(), recs.begin(), recs.end());
      per_model.push_back(std::move(recs));
    }
    metrics_out["mode"] = "held_out";
    metrics_out["manifest"] = cfg.manifest;
    metrics_out["folds"] = fold_reports;
    metrics_out["aggregate"] = aggregate_json(per_model);
    metrics_out["pooled"] = report_json(all_preds);
  }
  write_json_file(out / "metrics.json", metrics_out);
  write_predictions_csv(out / "predictions.csv", all_preds);
  std::printf("%s\n", metrics_out.dump(2).c_str());
  return 0;
}

int eval_dominance(const RunConfig& cfg, const fs::path& run, const fs::path& out) {
  const auto folds = load_fold_models(run, Task::dominance);
  const std::string manifest =
      cfg.eval.domain_shift && !cfg.eval.external_manifest.empty() ? cfg.eval.external_manifest : cfg.manifest;
  const auto studies = load_labeled(manifest, cfg.allow_label_mismatch);
  json reports = json::array();
  std::vector<metrics::ClassificationReport> reps;
  std::vector<DominanceRecord> pooled;
  for (const auto& fm : folds) {
    std::vector<const Study*> ptrs;
    if (!cfg.eval.domain_shift && !fm.test_ids.empty()) {
      ptrs = select(studies, fm.test_ids);
    } else {
      for (const auto& s : studies) ptrs.push_back(&s);
    }
    auto recs = predict_dominance_records(ptrs, fm.rca->model);
    reps.push_back(dominance_report(recs));
    json j = metrics::to_json(reps.back());
    j["fold"] = fm.fold;
    reports.push_back(j);
    pooled.insert(pooled.end(), recs.begin(), recs.end());
  }
  json metrics_out = {{"task", "dominance"}, {"manifest", manifest}, {"folds", reports}};
  metrics_out["aggregate"] = reps.size() >= 2 ? metrics::to_json(metrics::cross_val_aggregate(reps)) : json();
  write_json_file(out / "metrics.json", metrics_out);
  fs::create_directories(out);
  std::ofstream csv(out / "dominance_predictions.csv", std::ios::trunc);
  csv << "study_id,prob_left,pred_left,gt_left\n";
  for (const auto& r : pooled) {
    csv << r.study_id << "," << format_double(r.prob_left) << "," << (r.pred_left ? 1 : 0) << ","
        << (r.gt_left ? 1 : 0) << "\n";
  }
  if (!csv) throw RuntimeError("failed writing dominance predictions");
  std::printf("%s\n", metrics_out.dump(2).c_str());
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& checkpoints, const std::string& out_dir) {
  RunConfig cfg = resolve_config(o);
  const fs::path run = checkpoints.empty() ? fs::path(cfg.output_dir) : fs::path(checkpoints);
  const fs::path out = out_dir.empty() ? run / "eval" : fs::path(out_dir);
  write_json_file(out / "config.json", provenance(cfg));
  return cfg.task == Task::syntax ? eval_syntax(cfg, run, out) : eval_dominance(cfg, run, out);
}

// ---------------------------------------------------------------------------
// agreement and plot

std::string file_safe(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out;
}

int cmd_agreement(const std::string& input, const std::string& out_dir) {
  const auto raters = read_rater_csv(input);
  const auto table = metrics::agreement_table(raters);
  const fs::path out(out_dir);
  write_json_file(out / "agreement.json", metrics::to_json(table));
  std::map<std::string, const metrics::Rater*> by_name;
  for (const auto& r : raters) by_name[r.name] = &r;
  for (const auto& row : table.rows) {
    const auto& a = *by_name.at(row.first);
    const auto& b = *by_name.at(row.second);
    const std::string title = row.second + " vs " + row.first;
    plot::write_file(out / ("correlation_" + file_safe(row.first) + "_vs_" + file_safe(row.second) + ".svg"),
                     plot::correlation_svg(a.scores, b.scores, row.report, {title, row.first, row.second}));
    std::printf("%s: %s bias %.3f std %.3f\n", title.c_str(), plot::r2_label(row.report.r2).c_str(),
                row.report.bias_mean, row.report.deviation_std);
  }
  std::printf("average: %s\n", metrics::to_json(table.average).dump().c_str());
  return 0;
}

int cmd_plot(const std::string& input, const std::string& kind, const std::string& out) {
  if (kind != "correlation" && kind != "bland-altman") {
    throw SchemaError("unknown plot kind \"" + kind + "\" (expected correlation or bland-altman)");
  }
  const auto recs = read_predictions_csv(input);
  std::vector<double> gt, pred;
  for (const auto& r : recs) {
    gt.push_back(r.gt_total);
    pred.push_back(r.pred_total);
  }
  const fs::path path = out.empty() ? fs::path(fs::path(input).replace_extension("").string() + "_" + kind + ".svg") : fs::path(out);
  if (kind == "correlation") {
    plot::write_file(path, plot::correlation_svg(gt, pred, metrics::regression_report(gt, pred),
                                                 {"SYNTAX score", "Ground truth", "Prediction"}));
  } else {
    plot::write_file(path, plot::bland_altman_svg(metrics::bland_altman(gt, pred),
                                                  {"SYNTAX score", "Mean of prediction and ground truth",
                                                   "Prediction - ground truth"}));
  }
  std::printf("%s\n", path.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view SYNTAX score estimation from angiography videos"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  bool quiet = false;
  bool print_defaults = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");
  app.add_flag("--print-defaults", print_defaults, "Print the default configuration file and exit");

  Overrides o;
  std::string out_dir, checkpoints, input, kind = "correlation";
  int stage = 0;
  std::uint64_t seed = 0;
  std::string task, subset;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration (JSON)");
    sub->add_option("--seed", seed, "Seed overriding the configured one");
  };
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
  common(synth);
  synth->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train the RCA/LCA branches (or the dominance classifier)");
  common(train);
  train->add_option("--task", task, "syntax or dominance")->check(CLI::IsMember({"syntax", "dominance"}));
  train->add_flag("--no-cv", o.no_cv, "Single hold-out split instead of k-fold cross-validation");
  train->add_option("--stage", stage, "Run only this stage (1-3), resuming from the previous stage")
      ->check(CLI::Range(1, 3));
  train->add_flag("--allow-label-mismatch", o.allow_label_mismatch, "Recompute totals that disagree with RCA+LCA");
  train->add_option("--manifest", input, "Manifest overriding the configured one");
  train->add_option("--out", out_dir, "Run directory overriding the configured one");

  auto* eval = app.add_subcommand("eval", "Evaluate trained fold models");
  common(eval);
  eval->add_option("--task", task, "syntax or dominance")->check(CLI::IsMember({"syntax", "dominance"}));
  eval->add_option("--subset", subset, "all or nonzero")->check(CLI::IsMember({"all", "nonzero"}));
  eval->add_flag("--domain-shift", o.domain_shift, "Evaluate every fold model on an external manifest");
  eval->add_flag("--allow-label-mismatch", o.allow_label_mismatch, "Recompute totals that disagree with RCA+LCA");
  eval->add_option("--checkpoints", checkpoints, "Run directory holding the fold models");
  eval->add_option("--manifest", input, "Manifest to evaluate on (the external one with --domain-shift)");
  eval->add_option("--out", out_dir, "Output directory (default: <run>/eval)");

  auto* agreement = app.add_subcommand("agreement", "Inter-rater agreement from a rater score table");
  agreement->add_option("--input", input, "CSV: study_id,<rater>,<rater>,...")->required();
  agreement->add_option("--out", out_dir, "Output directory")->required();

  auto* plotcmd = app.add_subcommand("plot", "Plot a predictions CSV");
  plotcmd->add_option("--input", input, "Predictions CSV")->required();
  plotcmd->add_option("--kind", kind, "correlation or bland-altman");
  plotcmd->add_option("--out", out_dir, "Output SVG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (print_defaults) {
      std::printf("%s\n", default_config_json().dump(2).c_str());
      return 0;
    }
    for (auto* sub : {synth, train, eval}) {
      if (sub->parsed() && sub->count("--seed") > 0) o.seed = seed;
    }
    if (!task.empty()) o.task = task;
    if (!subset.empty()) o.subset = subset;
    if (synth->parsed()) return cmd_synth(o, out_dir);
    if (train->parsed()) {
      if (!input.empty()) o.manifest = input;
      if (!out_dir.empty()) o.output = out_dir;
      return cmd_train(o, stage);
    }
    if (eval->parsed()) {
      if (!input.empty()) (o.domain_shift ? o.external_manifest : o.manifest) = input;
      return cmd_eval(o, checkpoints, out_dir);
    }
    if (agreement->parsed()) return cmd_agreement(input, out_dir);
    if (plotcmd->parsed()) return cmd_plot(input, kind, out_dir);
    std::cout << app.help();
    return 2;
  } catch (const mvl::Error& e) {
    spdlog::error("{}", e.what());
    return mvl::exit_code(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 4;
  }
}
