#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mvl/checkpoint.hpp"
#include "mvl/error.hpp"
#include "mvl/manifest.hpp"
#include "mvl/metrics.hpp"
#include "mvl/model.hpp"
#include "mvl/nn/optim.hpp"
#include "mvl/rng.hpp"
#include "mvl/sampler.hpp"
#include "mvl/study.hpp"

namespace mvl {

// ---------------------------------------------------------------------------
// Configuration

struct StageConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 1e-4;

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct TrainConfig {
  std::array<StageConfig, 3> stages{{{30, 16, 1e-4}, {20, 8, 1e-4}, {10, 8, 1e-5}}};
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  std::uint64_t seed = 0;
  AugmentPolicy augmentation = AugmentPolicy::none;
  double val_fraction = 0.1;  // carved from the training studies of each fold

  const StageConfig& stage(int s) const { return stages.at(static_cast<std::size_t>(s - 1)); }

  void validate() const {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string name = "train.stage" + std::to_string(i + 1);
      if (stages[i].epochs == 0) throw SchemaError(name + ".epochs must be positive");
      if (stages[i].batch_size == 0) throw SchemaError(name + ".batch_size must be positive");
      if (!(stages[i].lr > 0.0) || !std::isfinite(stages[i].lr)) throw SchemaError(name + ".lr must be positive");
    }
    if (stages[2].lr > stages[0].lr) throw SchemaError("stage-3 lr must not exceed stage-1 lr");
    if (!(pct_start > 0.0 && pct_start < 1.0)) throw SchemaError("train.pct_start must lie in (0, 1)");
    if (!(div_factor > 0.0) || !(final_div_factor > 0.0)) throw SchemaError("train schedule factors must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw SchemaError("train.val_fraction must lie in [0, 1)");
  }

  nn::OneCycleConfig schedule(int s) const {
    nn::OneCycleConfig c;
    c.max_lr = stage(s).lr;
    c.pct_start = pct_start;
    c.div_factor = div_factor;
    c.final_div_factor = final_div_factor;
    return c;
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back({{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"lr", s.lr}});
  return {{"stages", stages},
          {"pct_start", c.pct_start},
          {"div_factor", c.div_factor},
          {"final_div_factor", c.final_div_factor},
          {"anneal", "cos"},
          {"seed", c.seed},
          {"augmentation", to_string(c.augmentation)},
          {"val_fraction", c.val_fraction}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  using detail::read_opt;
  detail::check_keys(j, {"stages", "pct_start", "div_factor", "final_div_factor", "anneal", "seed", "augmentation",
                         "val_fraction"},
                     "train");
  if (auto it = j.find("stages"); it != j.end()) {
    if (!it->is_array() || it->size() != 3) throw SchemaError("train.stages must list exactly three stages");
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string where = "train.stages[" + std::to_string(i) + "]";
      detail::check_keys((*it)[i], {"epochs", "batch_size", "lr"}, where);
      read_opt((*it)[i], "epochs", base.stages[i].epochs, where);
      read_opt((*it)[i], "batch_size", base.stages[i].batch_size, where);
      read_opt((*it)[i], "lr", base.stages[i].lr, where);
    }
  }
  read_opt(j, "pct_start", base.pct_start, "train");
  read_opt(j, "div_factor", base.div_factor, "train");
  read_opt(j, "final_div_factor", base.final_div_factor, "train");
  if (j.contains("anneal") && j.at("anneal") != "cos") throw SchemaError("train.anneal must be \"cos\"");
  read_opt(j, "seed", base.seed, "train");
  if (j.contains("augmentation")) {
    std::string s;
    read_opt(j, "augmentation", s, "train");
    base.augmentation = augment_policy_from_string(s);
  }
  read_opt(j, "val_fraction", base.val_fraction, "train");
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Samples and loss

/// The views of one vessel in a study together with the regression (or
/// classification) target.
struct StudySample {
  const Study* study = nullptr;
  std::vector<const View*> views;
  double target = 0.0;
};

struct ViewSample {
  const View* view = nullptr;
  double target = 0.0;
};

inline double sample_target(const Study& s, Vessel vessel, Task task) {
  if (task == Task::dominance) {
    if (!s.labels.dominance) throw ValidationError("study " + s.id + " has no dominance label");
    return *s.labels.dominance == Dominance::left ? 1.0 : 0.0;
  }
  const auto score = s.labels.score(vessel);
  if (!score) throw ValidationError("study " + s.id + " has no " + std::string(to_string(vessel)) + " score label");
  return score_transform(*score);
}

/// Studies without views of the vessel contribute no sample.
inline std::vector<StudySample> make_study_samples(const std::vector<const Study*>& studies, Vessel vessel,
                                                   Task task) {
  std::vector<StudySample> out;
  for (const Study* s : studies) {
    auto views = views_by_vessel(*s, vessel);
    if (views.empty()) continue;
    out.push_back({s, std::move(views), sample_target(*s, vessel, task)});
  }
  return out;
}

/// Each view inherits its study's vessel-level target.
inline std::vector<ViewSample> make_view_samples(const std::vector<StudySample>& studies) {
  std::vector<ViewSample> out;
  for (const auto& s : studies)
    for (const View* v : s.views) out.push_back({v, s.target});
  return out;
}

/// MSE on ln(1+s) for regression; binary cross-entropy on the logit for the
/// dominance task. Both are averaged over the batch.
struct Loss {
  Task task = Task::syntax;

  double value(double pred, double target) const {
    if (task == Task::syntax) return (pred - target) * (pred - target);
    // softplus(z) - t z, computed stably
    return std::max(pred, 0.0) + std::log1p(std::exp(-std::abs(pred))) - target * pred;
  }

  double grad(double pred, double target) const {
    if (task == Task::syntax) return 2.0 * (pred - target);
    return nn::sigmoid(pred) - target;
  }
};

// ---------------------------------------------------------------------------
// Batch losses with optional backward pass. Gradients accumulate into the
// model parameters; callers zero them.

template <class T>
double view_batch_loss(VesselModel<T>& model, const std::vector<ViewSample>& batch, const Loss& loss, bool backward,
                       AugmentPolicy policy = AugmentPolicy::none, std::uint64_t aug_seed = 0) {
  const auto& b = model.config().backbone;
  std::vector<const View*> views;
  for (const auto& s : batch) views.push_back(s.view);
  const Tensor<T> clips = make_clip_batch<T>(views, b.clip_length, b.input_height, b.input_width, policy, aug_seed);
  nn::Tape<T> tape;
  const Tensor<T> emb = model.backbone().forward(clips, backward ? &tape : nullptr);
  const Tensor<T> pred = model.view_output().forward(emb);
  const double n = static_cast<double>(batch.size());
  double total = 0.0;
  Tensor<T> dpred(pred.shape());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    total += loss.value(static_cast<double>(pred[i]), batch[i].target);
    dpred[i] = static_cast<T>(loss.grad(static_cast<double>(pred[i]), batch[i].target) / n);
  }
  if (backward) {
    const Tensor<T> demb = model.view_output().backward(emb, dpred);
    model.backbone().backward(tape, demb);
  }
  return total / n;
}

/// Head-only loss over precomputed per-study embeddings [L, E].
template <class T>
double head_batch_loss(VesselModel<T>& model, const std::vector<const Tensor<T>*>& tokens,
                       const std::vector<double>& targets, const Loss& loss, bool backward) {
  const double n = static_cast<double>(tokens.size());
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    nn::Tape<T> tape;
    const Tensor<T> fused = model.head().forward(*tokens[i], backward ? &tape : nullptr);
    const Tensor<T> pred = model.output().forward(fused);
    const double p = static_cast<double>(pred[0]);
    total += loss.value(p, targets[i]);
    if (backward) {
      Tensor<T> dpred({1, 1}, static_cast<T>(loss.grad(p, targets[i]) / n));
      const Tensor<T> dfused = model.output().backward(fused, dpred);
      model.head().backward(tape, dfused);
    }
  }
  return total / n;
}

/// End-to-end loss over whole studies: all views of the batch go through the
/// backbone together, then each study is fused separately.
template <class T>
double study_batch_loss(VesselModel<T>& model, const std::vector<StudySample>& batch, const Loss& loss, bool backward,
                        AugmentPolicy policy = AugmentPolicy::none, std::uint64_t aug_seed = 0) {
  const auto& b = model.config().backbone;
  std::vector<const View*> views;
  std::vector<std::size_t> offsets{0};
  for (const auto& s : batch) {
    views.insert(views.end(), s.views.begin(), s.views.end());
    offsets.push_back(views.size());
  }
  const Tensor<T> clips = make_clip_batch<T>(views, b.clip_length, b.input_height, b.input_width, policy, aug_seed);
  nn::Tape<T> tape;
  const Tensor<T> emb = model.backbone().forward(clips, backward ? &tape : nullptr);
  const std::size_t e = emb.dim(1);
  Tensor<T> demb(emb.shape());
  const double n = static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t l = offsets[i + 1] - offsets[i];
    Tensor<T> tokens({l, e}, std::vector<T>(emb.data() + offsets[i] * e, emb.data() + offsets[i + 1] * e));
    nn::Tape<T> head_tape;
    const Tensor<T> fused = model.head().forward(tokens, backward ? &head_tape : nullptr);
    const Tensor<T> pred = model.output().forward(fused);
    const double p = static_cast<double>(pred[0]);
    total += loss.value(p, batch[i].target);
    if (backward) {
      Tensor<T> dpred({1, 1}, static_cast<T>(loss.grad(p, batch[i].target) / n));
      const Tensor<T> dfused = model.output().backward(fused, dpred);
      const Tensor<T> dtok = model.head().backward(head_tape, dfused);
      std::copy_n(dtok.data(), l * e, demb.data() + offsets[i] * e);
    }
  }
  if (backward) model.backbone().backward(tape, demb);
  return total / n;
}

// ---------------------------------------------------------------------------
// Parameter fingerprint (freeze checks)

template <class T>
std::uint64_t parameter_hash(const nn::ParamList<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the raw bytes
  for (const auto* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    for (std::size_t i = 0; i < p->size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Stage training

struct StageHistory {
  int stage = 0;
  std::vector<double> train_loss;                // per epoch, mean over batches
  std::vector<std::optional<double>> val_metric;  // per epoch: RMSE (syntax) or BCE (dominance)
  std::vector<double> lr_trace;                  // per optimizer step
  std::optional<std::size_t> best_epoch;
  std::optional<double> best_val;
};

inline nlohmann::json to_json(const StageHistory& h) {
  nlohmann::json val = nlohmann::json::array();
  for (const auto& v : h.val_metric) val.push_back(metrics::opt_json(v));
  return {{"stage", h.stage},
          {"train_loss", h.train_loss},
          {"val_metric", val},
          {"lr", h.lr_trace},
          {"best_epoch", h.best_epoch ? nlohmann::json(*h.best_epoch) : nlohmann::json()},
          {"best_val", metrics::opt_json(h.best_val)}};
}

inline StageHistory stage_history_from_json(const nlohmann::json& j) {
  StageHistory h;
  h.stage = j.at("stage").get<int>();
  h.train_loss = j.at("train_loss").get<std::vector<double>>();
  for (const auto& v : j.at("val_metric")) h.val_metric.push_back(v.is_null() ? std::nullopt : std::optional(v.get<double>()));
  h.lr_trace = j.at("lr").get<std::vector<double>>();
  if (!j.at("best_epoch").is_null()) h.best_epoch = j.at("best_epoch").get<std::size_t>();
  if (!j.at("best_val").is_null()) h.best_val = j.at("best_val").get<double>();
  return h;
}

/// Checkpoint layout {run}/{vessel}/fold{i}/stage{s}/epoch{e}.ckpt. An empty
/// run directory disables checkpointing.
struct CheckpointPlan {
  std::filesystem::path run_dir;
  std::size_t fold = 0;

  bool enabled() const { return !run_dir.empty(); }

  std::filesystem::path branch_dir(Vessel v) const {
    return run_dir / to_string(v) / ("fold" + std::to_string(fold));
  }
  std::filesystem::path stage_dir(Vessel v, int stage) const {
    return branch_dir(v) / ("stage" + std::to_string(stage));
  }
  std::filesystem::path epoch_path(Vessel v, int stage, std::size_t epoch) const {
    return stage_dir(v, stage) / ("epoch" + std::to_string(epoch) + ".ckpt");
  }
  std::filesystem::path final_path(Vessel v, int stage) const { return stage_dir(v, stage) / "final.ckpt"; }
  std::filesystem::path best_path(Vessel v, int stage) const { return stage_dir(v, stage) / "best.ckpt"; }
};

/// Runs the three training stages of one vessel branch.
template <class T>
class BranchTrainer {
 public:
  BranchTrainer(VesselModel<T>& model, TrainConfig cfg, std::vector<StudySample> train,
                std::vector<StudySample> val = {}, CheckpointPlan plan = {}, int completed_stages = 0)
      : model_(model),
        cfg_(std::move(cfg)),
        train_(std::move(train)),
        val_(std::move(val)),
        plan_(std::move(plan)),
        completed_(completed_stages),
        loss_{model.config().task} {
    cfg_.validate();
  }

  int completed_stages() const { return completed_; }
  const std::vector<StageHistory>& histories() const { return histories_; }

  /// Stage 1: backbone plus the single-view output layer on individual views.
  StageHistory stage1(const std::optional<std::filesystem::path>& resume = std::nullopt) {
    const auto train_views = make_view_samples(train_);
    const auto val_views = make_view_samples(val_);
    if (train_views.empty()) throw ValidationError("stage 1: no labeled training views");
    nn::ParamList<T> params = model_.backbone_params();
    for (auto* p : model_.view_head_params()) params.push_back(p);
    auto step = [&](const std::vector<std::size_t>& idx, std::uint64_t aug) {
      std::vector<ViewSample> batch;
      for (auto i : idx) batch.push_back(train_views[i]);
      return view_batch_loss(model_, batch, loss_, true, cfg_.augmentation, aug);
    };
    auto validate = [&]() -> std::optional<double> {
      if (val_views.empty()) return std::nullopt;
      double sum = 0.0;
      for (std::size_t s = 0; s < val_views.size(); s += 16) {
        std::vector<ViewSample> batch(val_views.begin() + static_cast<std::ptrdiff_t>(s),
                                      val_views.begin() + static_cast<std::ptrdiff_t>(std::min(s + 16, val_views.size())));
        sum += view_batch_loss(model_, batch, loss_, false) * static_cast<double>(batch.size());
      }
      return to_metric(sum / static_cast<double>(val_views.size()));
    };
    auto h = run_stage(1, params, train_views.size(), step, validate, resume);
    completed_ = std::max(completed_, 1);
    return h;
  }

  /// Stage 2: frozen backbone; only the fusion head and output layer train.
  /// Embeddings are computed once since the backbone does not change. The
  /// best-validation head is kept, as in stage 3.
  StageHistory stage2(const std::optional<std::filesystem::path>& resume = std::nullopt) {
    if (completed_ < 1) throw RuntimeError("stage 2: missing backbone (stage 1 has not been run)");
    if (train_.empty()) throw ValidationError("stage 2: no labeled training studies");
    if (!resume && model_.config().head.kind == nn::HeadKind::mean) {
      // With mean fusion the study output starts as the average of the
      // per-view predictions.
      model_.output().weight().value = model_.view_output().weight().value;
      model_.output().bias().value = model_.view_output().bias().value;
    }
    const std::uint64_t frozen = parameter_hash(model_.backbone_params());
    const auto train_tokens = embed_all(train_);
    const auto val_tokens = embed_all(val_);
    std::vector<double> targets, val_targets;
    for (const auto& s : train_) targets.push_back(s.target);
    for (const auto& s : val_) val_targets.push_back(s.target);
    nn::ParamList<T> params = model_.head_params();
    auto step = [&](const std::vector<std::size_t>& idx, std::uint64_t) {
      std::vector<const Tensor<T>*> tok;
      std::vector<double> tgt;
      for (auto i : idx) {
        tok.push_back(&train_tokens[i]);
        tgt.push_back(targets[i]);
      }
      return head_batch_loss(model_, tok, tgt, loss_, true);
    };
    auto validate = [&]() -> std::optional<double> {
      if (val_.empty()) return std::nullopt;
      std::vector<const Tensor<T>*> tok;
      for (const auto& t : val_tokens) tok.push_back(&t);
      return to_metric(head_batch_loss(model_, tok, val_targets, loss_, false));
    };
    auto h = run_stage(2, params, train_.size(), step, validate, resume, /*retain_best=*/true);
    if (parameter_hash(model_.backbone_params()) != frozen) {
      throw RuntimeError("stage 2 modified frozen backbone weights");
    }
    completed_ = std::max(completed_, 2);
    return h;
  }

  /// Stage 3: end-to-end fine-tuning. The model with the best validation
  /// metric is retained when validation data exist.
  StageHistory stage3(const std::optional<std::filesystem::path>& resume = std::nullopt) {
    if (completed_ < 2) throw RuntimeError("stage 3: missing prior stages (stages 1 and 2 must run first)");
    if (train_.empty()) throw ValidationError("stage 3: no labeled training studies");
    nn::ParamList<T> params = model_.backbone_params();
    for (auto* p : model_.head_params()) params.push_back(p);
    auto step = [&](const std::vector<std::size_t>& idx, std::uint64_t aug) {
      std::vector<StudySample> batch;
      for (auto i : idx) batch.push_back(train_[i]);
      return study_batch_loss(model_, batch, loss_, true, cfg_.augmentation, aug);
    };
    auto validate = [&]() -> std::optional<double> {
      if (val_.empty()) return std::nullopt;
      return to_metric(study_loss(val_));
    };
    auto h = run_stage(3, params, train_.size(), step, validate, resume, /*retain_best=*/true);
    completed_ = 3;
    return h;
  }

  std::vector<StageHistory> run_all() {
    std::vector<StageHistory> out;
    if (completed_ < 1) out.push_back(stage1());
    if (completed_ < 2) out.push_back(stage2());
    if (completed_ < 3) out.push_back(stage3());
    return out;
  }

  /// Mean loss over whole studies without augmentation.
  double study_loss(const std::vector<StudySample>& samples) {
    double sum = 0.0;
    for (const auto& s : samples) {
      sum += loss_.value(static_cast<double>(model_.predict_from_embeddings(model_.embed_views(s.views))), s.target);
    }
    return sum / static_cast<double>(samples.size());
  }

 private:
  double to_metric(double mean_loss) const { return loss_.task == Task::syntax ? std::sqrt(mean_loss) : mean_loss; }

  std::vector<Tensor<T>> embed_all(const std::vector<StudySample>& samples) const {
    std::vector<Tensor<T>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(model_.embed_views(s.views));
    return out;
  }

  nlohmann::json stage_metadata(int stage, std::size_t epoch, std::size_t steps_per_epoch,
                                const StageHistory& h) const {
    return {{"stage", stage},
            {"epoch", epoch},
            {"epochs", cfg_.stage(stage).epochs},
            {"steps_per_epoch", steps_per_epoch},
            {"schedule_step", (epoch + 1) * steps_per_epoch},
            {"lr", cfg_.stage(stage).lr},
            {"schedule", {{"kind", "one_cycle"}, {"pct_start", cfg_.pct_start}, {"div_factor", cfg_.div_factor},
                          {"final_div_factor", cfg_.final_div_factor}, {"anneal", "cos"}}},
            {"seed", cfg_.seed},
            {"fold", plan_.fold},
            {"completed_stages", completed_},
            {"train_config", to_json(cfg_)},
            {"history", to_json(h)}};
  }

  template <class StepFn, class ValFn>
  StageHistory run_stage(int stage, const nn::ParamList<T>& params, std::size_t n_samples, StepFn&& step,
                         ValFn&& validate, const std::optional<std::filesystem::path>& resume,
                         bool retain_best = false) {
    const StageConfig& sc = cfg_.stage(stage);
    const std::size_t steps_per_epoch = (n_samples + sc.batch_size - 1) / sc.batch_size;
    nn::OneCycleSchedule schedule(cfg_.schedule(stage), sc.epochs * steps_per_epoch);
    nn::Adam<T> adam(params);
    StageHistory h;
    h.stage = stage;
    std::size_t start_epoch = 0;
    std::optional<VesselModel<T>> best;

    if (resume) {
      Checkpoint<T> ck = load_checkpoint_into(*resume, model_);
      const auto& meta = ck.metadata;
      if (meta.value("stage", 0) != stage) throw ValidationError("resume checkpoint belongs to another stage");
      if (meta.at("steps_per_epoch").template get<std::size_t>() != steps_per_epoch) {
        throw ValidationError("resume checkpoint was written for a different training set size");
      }
      if (!ck.optimizer || ck.optimizer->m.size() != params.size()) {
        throw ValidationError("resume checkpoint has no matching optimizer state");
      }
      adam.state() = std::move(*ck.optimizer);
      h = stage_history_from_json(meta.at("history"));
      start_epoch = meta.at("epoch").template get<std::size_t>() + 1;
      if (retain_best && h.best_epoch && *h.best_epoch + 1 < start_epoch) {
        best = load_checkpoint<T>(plan_.best_path(model_.vessel(), stage), model_.config()).model;
      } else if (retain_best && h.best_epoch) {
        best = model_;
      }
    }

    const Vessel vessel = model_.vessel();
    for (std::size_t epoch = start_epoch; epoch < sc.epochs; ++epoch) {
      std::vector<std::size_t> order(n_samples);
      for (std::size_t i = 0; i < n_samples; ++i) order[i] = i;
      Rng rng(derive_seed(cfg_.seed, 0x5741u, static_cast<std::uint64_t>(vessel), plan_.fold, stage, epoch));
      rng.shuffle(std::span<std::size_t>(order));
      double sum = 0.0;
      for (std::size_t b = 0; b < steps_per_epoch; ++b) {
        const std::size_t lo = b * sc.batch_size, hi = std::min(lo + sc.batch_size, n_samples);
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                     order.begin() + static_cast<std::ptrdiff_t>(hi));
        adam.zero_grad();
        const double l = step(idx, derive_seed(cfg_.seed, 0xa06u, static_cast<std::uint64_t>(vessel), plan_.fold,
                                               stage, epoch, b));
        if (!std::isfinite(l)) {
          throw RuntimeError("non-finite training loss in stage " + std::to_string(stage) + " epoch " +
                             std::to_string(epoch));
        }
        const std::size_t global = epoch * steps_per_epoch + b;
        const double lr = schedule.lr(global);
        adam.step(lr, schedule.momentum(global));
        h.lr_trace.push_back(lr);
        sum += l * static_cast<double>(idx.size());
      }
      h.train_loss.push_back(sum / static_cast<double>(n_samples));
      const std::optional<double> val = validate();
      h.val_metric.push_back(val);
      bool improved = false;
      if (val && (!h.best_val || *val < *h.best_val)) {
        h.best_val = val;
        h.best_epoch = epoch;
        improved = true;
        if (retain_best) best = model_;
      }
      spdlog::info("{} fold {} stage {} epoch {}/{}: train loss {:.5f}{}", to_string(vessel), plan_.fold, stage,
                   epoch + 1, sc.epochs, h.train_loss.back(),
                   val ? fmt::format(", val {:.5f}", *val) : std::string());
      if (plan_.enabled()) {
        const auto meta = stage_metadata(stage, epoch, steps_per_epoch, h);
        save_checkpoint(plan_.epoch_path(vessel, stage, epoch), model_, meta, std::nullopt, &adam.state());
        if (retain_best && improved) save_checkpoint(plan_.best_path(vessel, stage), model_, meta);
      }
    }
    if (retain_best && best) model_.copy_parameters_from(*best);
    if (plan_.enabled()) {
      completed_ = std::max(completed_, stage);
      save_checkpoint(plan_.final_path(vessel, stage), model_,
                      stage_metadata(stage, sc.epochs - 1, steps_per_epoch, h));
    }
    histories_.push_back(h);
    return h;
  }

  VesselModel<T>& model_;
  TrainConfig cfg_;
  std::vector<StudySample> train_;
  std::vector<StudySample> val_;
  CheckpointPlan plan_;
  int completed_;
  Loss loss_;
  std::vector<StageHistory> histories_;
};

// ---------------------------------------------------------------------------
// Folds

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::string>> folds;  // sorted study ids per fold
  double global_zero_share = 0.0;
  std::vector<double> fold_zero_share;

  std::vector<std::string> test_ids(std::size_t i) const { return folds.at(i); }

  std::vector<std::string> train_ids(std::size_t i) const {
    std::vector<std::string> out;
    for (std::size_t f = 0; f < folds.size(); ++f)
      if (f != i) out.insert(out.end(), folds[f].begin(), folds[f].end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

struct LabeledId {
  std::string id;
  bool nonzero = false;
};

/// Shuffles each class with the seed and deals the zero class, then the
/// nonzero class, round-robin across folds. The nonzero deal continues where
/// the zero deal stopped so fold sizes differ by at most one.
inline FoldPlan make_folds(const std::vector<LabeledId>& studies, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("make_folds: k must be at least 2");
  if (studies.size() < k) {
    throw ValidationError("make_folds: " + std::to_string(studies.size()) + " labeled studies cannot fill " +
                          std::to_string(k) + " folds");
  }
  std::set<std::string> seen;
  std::vector<std::string> zero, nonzero;
  for (const auto& s : studies) {
    if (!seen.insert(s.id).second) throw ValidationError("make_folds: duplicate study id " + s.id);
    (s.nonzero ? nonzero : zero).push_back(s.id);
  }
  std::sort(zero.begin(), zero.end());
  std::sort(nonzero.begin(), nonzero.end());
  Rng rng(derive_seed(seed, 0xf01du));
  rng.shuffle(std::span<std::string>(zero));
  rng.shuffle(std::span<std::string>(nonzero));

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.folds.resize(k);
  std::vector<std::size_t> zeros(k, 0);
  std::size_t next = 0;
  for (const auto& id : zero) {
    zeros[next % k]++;
    plan.folds[next++ % k].push_back(id);
  }
  for (const auto& id : nonzero) plan.folds[next++ % k].push_back(id);
  plan.global_zero_share = static_cast<double>(zero.size()) / static_cast<double>(studies.size());
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(plan.folds[f].begin(), plan.folds[f].end());
    plan.fold_zero_share.push_back(static_cast<double>(zeros[f]) / static_cast<double>(plan.folds[f].size()));
  }
  return plan;
}

inline std::vector<LabeledId> labeled_ids(const Manifest& m) {
  std::vector<LabeledId> out;
  for (const auto& s : m.studies)
    if (s.labels.syntax_total) out.push_back({s.id, *s.labels.syntax_total > 0.0});
  return out;
}

inline std::vector<LabeledId> labeled_ids(const std::vector<Study>& studies) {
  std::vector<LabeledId> out;
  for (const auto& s : studies)
    if (s.labels.syntax_total) out.push_back({s.id, *s.labels.syntax_total > 0.0});
  return out;
}

inline FoldPlan make_folds(const Manifest& m, std::size_t k = 5, std::uint64_t seed = 0) {
  return make_folds(labeled_ids(m), k, seed);
}

inline nlohmann::json to_json(const FoldPlan& p) {
  return {{"k", p.k},
          {"seed", p.seed},
          {"folds", p.folds},
          {"global_zero_share", p.global_zero_share},
          {"fold_zero_share", p.fold_zero_share}};
}

/// Stratified hold-out of roughly `fraction` of the ids (at least one per
/// class when the class has two or more members).
inline std::pair<std::vector<std::string>, std::vector<std::string>> split_validation(
    const std::vector<LabeledId>& ids, double fraction, std::uint64_t seed) {
  std::vector<std::string> train, val;
  if (fraction <= 0.0) {
    for (const auto& s : ids) train.push_back(s.id);
    return {train, val};
  }
  for (bool cls : {false, true}) {
    std::vector<std::string> group;
    for (const auto& s : ids)
      if (s.nonzero == cls) group.push_back(s.id);
    std::sort(group.begin(), group.end());
    Rng rng(derive_seed(seed, 0x7a1u, cls ? 1u : 0u));
    rng.shuffle(std::span<std::string>(group));
    std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(group.size())));
    if (n_val == 0 && group.size() >= 2) n_val = 1;
    val.insert(val.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.insert(train.end(), group.begin() + static_cast<std::ptrdiff_t>(n_val), group.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

// ---------------------------------------------------------------------------
// Threshold

struct ThresholdFit {
  double tau = 0.5;
  std::optional<double> f1_macro;
  bool degenerate = false;
};

inline constexpr double kDefaultThreshold = 0.5;

/// Chooses tau maximizing macro-F1 of (prediction > tau) among midpoints of
/// the sorted predicted totals; the smallest tau wins ties.
inline ThresholdFit fit_threshold(const std::vector<double>& pred_total, const std::vector<double>& gt_total) {
  if (pred_total.size() != gt_total.size()) throw ValidationError("fit_threshold: length mismatch");
  std::vector<bool> y;
  for (double g : gt_total) y.push_back(g > 0.0);
  const auto n_pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), true));
  if (n_pos == 0 || n_pos == y.size()) {
    spdlog::warn("threshold fit: validation labels contain a single class; using tau = {}", kDefaultThreshold);
    return {kDefaultThreshold, std::nullopt, true};
  }
  std::vector<double> sorted = pred_total;
  std::sort(sorted.begin(), sorted.end());
  ThresholdFit best;
  best.f1_macro.reset();
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
    const double tau = 0.5 * (sorted[i] + sorted[i + 1]);
    std::vector<bool> yhat;
    for (double p : pred_total) yhat.push_back(p > tau);
    const double f1 = metrics::f1_macro(metrics::confusion(y, yhat)).value_or(0.0);
    if (!best.f1_macro || f1 > *best.f1_macro || (f1 == *best.f1_macro && tau < best.tau)) {
      best.tau = tau;
      best.f1_macro = f1;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Study-level training and evaluation

struct BranchResult {
  Vessel vessel = Vessel::LCA;
  std::vector<StageHistory> stages;
};

inline nlohmann::json to_json(const BranchResult& b) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : b.stages) stages.push_back(to_json(s));
  return {{"vessel", to_string(b.vessel)}, {"stages", stages}};
}

template <class T>
struct TrainedPredictor {
  StudyPredictor<T> predictor;
  std::vector<BranchResult> branches;
  ThresholdFit threshold;
  bool complete = true;  // all three stages have run
};

inline std::vector<const Study*> select(const std::vector<Study>& studies, const std::vector<std::string>& ids) {
  std::map<std::string, const Study*> by_id;
  for (const auto& s : studies) by_id[s.id] = &s;
  std::vector<const Study*> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("unknown study id " + id);
    out.push_back(it->second);
  }
  return out;
}

inline std::uint64_t model_seed(std::uint64_t seed, Vessel v, std::size_t fold) {
  return derive_seed(seed, 0x1217u, static_cast<std::uint64_t>(v), fold);
}

/// Trains one branch. With `only_stage` in 1..3 just that stage runs, after
/// the final checkpoint of the previous stage has been loaded; 0 runs all
/// three stages.
template <class T>
BranchResult train_branch(VesselModel<T>& model, const TrainConfig& cfg, std::vector<StudySample> train,
                          std::vector<StudySample> val, const CheckpointPlan& plan = {}, int only_stage = 0) {
  if (only_stage < 0 || only_stage > 3) throw SchemaError("stage must be 1, 2 or 3");
  int completed = 0;
  if (only_stage > 1) {
    const auto prev = plan.final_path(model.vessel(), only_stage - 1);
    if (!plan.enabled() || !std::filesystem::exists(prev)) {
      throw RuntimeError("stage " + std::to_string(only_stage) + ": missing stage " + std::to_string(only_stage - 1) +
                         " checkpoint " + prev.string());
    }
    load_checkpoint_into(prev, model);
    completed = only_stage - 1;
  }
  BranchTrainer<T> trainer(model, cfg, std::move(train), std::move(val), plan, completed);
  BranchResult r{model.vessel(), {}};
  switch (only_stage) {
    case 0: r.stages = trainer.run_all(); break;
    case 1: r.stages.push_back(trainer.stage1()); break;
    case 2: r.stages.push_back(trainer.stage2()); break;
    default: r.stages.push_back(trainer.stage3()); break;
  }
  return r;
}

/// Trains the RCA and LCA branches and fits the nonzero threshold on the
/// validation studies. Stopping before stage 3 (`only_stage` 1 or 2) leaves
/// the predictor incomplete and the threshold at its default.
template <class T>
TrainedPredictor<T> train_predictor(const std::vector<const Study*>& train, const std::vector<const Study*>& val,
                                    const ModelConfig& rca_cfg, const ModelConfig& lca_cfg, const TrainConfig& cfg,
                                    const CheckpointPlan& plan = {}, int only_stage = 0) {
  if (rca_cfg.vessel != Vessel::RCA || lca_cfg.vessel != Vessel::LCA) {
    throw SchemaError("predictor needs an RCA and an LCA model config");
  }
  if (rca_cfg.task != Task::syntax || lca_cfg.task != Task::syntax) {
    throw SchemaError("study predictor models must use the syntax task");
  }
  std::optional<VesselModel<T>> models[2];
  std::vector<BranchResult> branches;
  for (const ModelConfig* mc : {&rca_cfg, &lca_cfg}) {
    VesselModel<T> model(*mc);
    model.init(model_seed(cfg.seed, mc->vessel, plan.fold));
    branches.push_back(train_branch(model, cfg, make_study_samples(train, mc->vessel, Task::syntax),
                                    make_study_samples(val, mc->vessel, Task::syntax), plan, only_stage));
    models[mc->vessel == Vessel::RCA ? 0 : 1] = std::move(model);
  }
  TrainedPredictor<T> out{StudyPredictor<T>{std::move(*models[0]), std::move(*models[1]), kDefaultThreshold},
                          std::move(branches),
                          {},
                          only_stage == 0 || only_stage == 3};
  if (!out.complete) return out;
  const std::vector<const Study*>& fit_on = val.empty() ? train : val;
  std::vector<double> pred, gt;
  for (const Study* s : fit_on) {
    if (!s->labels.syntax_total) continue;
    pred.push_back(predict_study(*s, out.predictor).score_total);
    gt.push_back(*s->labels.syntax_total);
  }
  if (val.empty()) spdlog::warn("no validation studies; fitting the nonzero threshold on training studies");
  out.threshold = fit_threshold(pred, gt);
  out.predictor.nonzero_threshold = out.threshold.tau;
  return out;
}

template <class T>
metrics::PredictionRecord prediction_record(const Study& s, const StudyPredictor<T>& predictor) {
  const StudyPrediction p = predict_study(s, predictor);
  if (!s.labels.has_all_scores()) throw ValidationError("study " + s.id + " lacks ground-truth scores");
  return {s.id,
          p.score_rca,
          p.score_lca,
          p.score_total,
          p.nonzero,
          *s.labels.syntax_rca,
          *s.labels.syntax_lca,
          *s.labels.syntax_total};
}

template <class T>
std::vector<metrics::PredictionRecord> predict_records(const std::vector<const Study*>& studies,
                                                       const StudyPredictor<T>& predictor) {
  std::vector<metrics::PredictionRecord> out;
  for (const Study* s : studies) out.push_back(prediction_record(*s, predictor));
  return out;
}

/// Full-population and nonzero-subgroup evaluation of the same predictions.
struct EvalPair {
  metrics::EvalReport all;
  std::optional<metrics::EvalReport> nonzero;
};

inline EvalPair evaluate_pair(const std::vector<metrics::PredictionRecord>& recs) {
  EvalPair e{metrics::evaluate(recs), std::nullopt};
  try {
    e.nonzero = metrics::subgroup_eval(recs, metrics::gt_nonzero);
  } catch (const UndefinedMetric& err) {
    spdlog::warn("nonzero subgroup report skipped: {}", err.what());
  }
  return e;
}

inline nlohmann::json to_json(const EvalPair& e) {
  return {{"all", metrics::to_json(e.all)},
          {"nonzero", e.nonzero ? metrics::to_json(*e.nonzero) : nlohmann::json()}};
}

struct FoldResult {
  std::size_t fold = 0;
  bool evaluated = false;  // false when training stopped before stage 3
  std::vector<metrics::PredictionRecord> predictions;
  EvalPair report;
  ThresholdFit threshold;
  std::vector<BranchResult> branches;
};

struct CvResult {
  std::optional<FoldPlan> plan;  // absent for a single hold-out split
  std::vector<FoldResult> folds;
  metrics::AggregateRow aggregate_all;
  metrics::AggregateRow aggregate_nonzero;
};

inline nlohmann::json to_json(const CvResult& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json j = f.evaluated ? to_json(f.report) : nlohmann::json::object();
    j["fold"] = f.fold;
    j["evaluated"] = f.evaluated;
    if (f.evaluated) {
      j["threshold"] = f.threshold.tau;
      j["threshold_degenerate"] = f.threshold.degenerate;
    }
    folds.push_back(j);
  }
  return {{"folds", folds},
          {"aggregate", {{"all", metrics::to_json(r.aggregate_all)}, {"nonzero", metrics::to_json(r.aggregate_nonzero)}}},
          {"plan", r.plan ? to_json(*r.plan) : nlohmann::json()}};
}

/// Fold-level aggregation: mean and sample STD of each metric over folds.
inline void aggregate_folds(CvResult& r) {
  std::vector<metrics::EvalReport> all, nonzero;
  for (const auto& f : r.folds) {
    if (!f.evaluated) continue;
    all.push_back(f.report.all);
    if (f.report.nonzero) nonzero.push_back(*f.report.nonzero);
  }
  if (all.size() >= 2) r.aggregate_all = metrics::cross_val_aggregate(all);
  if (nonzero.size() >= 2) r.aggregate_nonzero = metrics::cross_val_aggregate(nonzero);
}

/// Train/test partition of study ids.
struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

inline std::vector<Split> fold_splits(const FoldPlan& p) {
  std::vector<Split> out;
  for (std::size_t f = 0; f < p.folds.size(); ++f) out.push_back({p.train_ids(f), p.test_ids(f)});
  return out;
}

/// Single stratified hold-out split used when cross-validation is off.
inline Split holdout_split(const std::vector<LabeledId>& ids, double test_fraction, std::uint64_t seed) {
  auto [train, test] = split_validation(ids, test_fraction, derive_seed(seed, 0x7e57u));
  if (train.empty() || test.empty()) throw ValidationError("hold-out split leaves an empty train or test set");
  return {std::move(train), std::move(test)};
}

/// Trains and evaluates the study predictor on each split. Split i uses
/// checkpoint directory fold{i}.
template <class T>
CvResult run_splits(const std::vector<Study>& studies, const std::vector<Split>& splits, const ModelConfig& rca_cfg,
                    const ModelConfig& lca_cfg, const TrainConfig& cfg, const std::filesystem::path& run_dir = {},
                    int only_stage = 0) {
  CvResult result;
  std::map<std::string, bool> nonzero;
  for (const auto& s : labeled_ids(studies)) nonzero[s.id] = s.nonzero;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    std::vector<LabeledId> pool;
    for (const auto& id : splits[f].train) {
      auto it = nonzero.find(id);
      if (it == nonzero.end()) throw ValidationError("study " + id + " has no SYNTAX label");
      pool.push_back({id, it->second});
    }
    const auto [train_ids, val_ids] = split_validation(pool, cfg.val_fraction, derive_seed(cfg.seed, f));
    CheckpointPlan plan{run_dir, f};
    auto trained = train_predictor<T>(select(studies, train_ids), select(studies, val_ids), rca_cfg, lca_cfg, cfg,
                                      plan, only_stage);
    FoldResult fr;
    fr.fold = f;
    fr.branches = std::move(trained.branches);
    if (trained.complete) {
      fr.evaluated = true;
      fr.predictions = predict_records(select(studies, splits[f].test), trained.predictor);
      fr.report = evaluate_pair(fr.predictions);
      fr.threshold = trained.threshold;
      if (plan.enabled()) {
        for (Vessel v : {Vessel::RCA, Vessel::LCA}) {
          save_checkpoint(plan.branch_dir(v) / "model.ckpt", trained.predictor.model(v),
                          {{"fold", f}, {"train_config", to_json(cfg)}, {"test_ids", splits[f].test}},
                          trained.threshold.tau);
        }
      }
    }
    result.folds.push_back(std::move(fr));
  }
  aggregate_folds(result);
  return result;
}

/// k-fold cross-validation of the study predictor.
template <class T>
CvResult run_cv(const std::vector<Study>& studies, const ModelConfig& rca_cfg, const ModelConfig& lca_cfg,
                const TrainConfig& cfg, std::size_t k = 5, const std::filesystem::path& run_dir = {},
                int only_stage = 0) {
  const FoldPlan plan = make_folds(labeled_ids(studies), k, cfg.seed);
  CvResult result = run_splits<T>(studies, fold_splits(plan), rca_cfg, lca_cfg, cfg, run_dir, only_stage);
  result.plan = plan;
  return result;
}

// ---------------------------------------------------------------------------
// Dominance (binary, RCA branch)

struct DominanceRecord {
  std::string study_id;
  double prob_left = 0.0;
  bool pred_left = false;
  bool gt_left = false;
};

template <class T>
std::vector<DominanceRecord> predict_dominance_records(const std::vector<const Study*>& studies,
                                                       const VesselModel<T>& model) {
  std::vector<DominanceRecord> out;
  for (const Study* s : studies) {
    if (!s->labels.dominance) continue;
    const auto views = views_by_vessel(*s, Vessel::RCA);
    if (views.empty()) {
      spdlog::warn("study {} has no RCA views; skipped for dominance", s->id);
      continue;
    }
    const double p = predict_dominance(views, model);
    out.push_back({s->id, p, p > 0.5, *s->labels.dominance == Dominance::left});
  }
  return out;
}

/// Classification report where the "nonzero" class stands for left dominance.
inline metrics::ClassificationReport dominance_report(const std::vector<DominanceRecord>& recs) {
  std::vector<bool> y, yhat;
  std::vector<double> p;
  for (const auto& r : recs) {
    y.push_back(r.gt_left);
    yhat.push_back(r.pred_left);
    p.push_back(r.prob_left);
  }
  return metrics::classification_report(y, yhat, p);
}

inline std::vector<LabeledId> dominance_ids(const std::vector<Study>& studies) {
  std::vector<LabeledId> out;
  for (const auto& s : studies)
    if (s.labels.dominance && !views_by_vessel(s, Vessel::RCA).empty())
      out.push_back({s.id, *s.labels.dominance == Dominance::left});
  return out;
}

struct DominanceCvResult {
  std::optional<FoldPlan> plan;
  std::vector<std::vector<DominanceRecord>> predictions;  // empty per split when not evaluated
  std::vector<metrics::ClassificationReport> reports;
  metrics::AggregateRow aggregate;
};

inline nlohmann::json to_json(const DominanceCvResult& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t f = 0; f < r.reports.size(); ++f) {
    nlohmann::json j = metrics::to_json(r.reports[f]);
    j["fold"] = f;
    folds.push_back(j);
  }
  return {{"folds", folds}, {"aggregate", metrics::to_json(r.aggregate)},
          {"plan", r.plan ? to_json(*r.plan) : nlohmann::json()}};
}

template <class T>
DominanceCvResult run_dominance_splits(const std::vector<Study>& studies, const std::vector<Split>& splits,
                                       const ModelConfig& rca_cfg, const TrainConfig& cfg,
                                       const std::filesystem::path& run_dir = {}, int only_stage = 0) {
  if (rca_cfg.task != Task::dominance || rca_cfg.vessel != Vessel::RCA) {
    throw SchemaError("dominance training needs an RCA model config with task \"dominance\"");
  }
  DominanceCvResult r;
  std::map<std::string, bool> left;
  for (const auto& s : dominance_ids(studies)) left[s.id] = s.nonzero;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    std::vector<LabeledId> pool;
    for (const auto& id : splits[f].train) {
      auto it = left.find(id);
      if (it == left.end()) throw ValidationError("study " + id + " has no dominance label or RCA view");
      pool.push_back({id, it->second});
    }
    const auto [train_ids, val_ids] = split_validation(pool, cfg.val_fraction, derive_seed(cfg.seed, f));
    CheckpointPlan plan{run_dir, f};
    VesselModel<T> model(rca_cfg);
    model.init(model_seed(cfg.seed, Vessel::RCA, f));
    train_branch(model, cfg, make_study_samples(select(studies, train_ids), Vessel::RCA, Task::dominance),
                 make_study_samples(select(studies, val_ids), Vessel::RCA, Task::dominance), plan, only_stage);
    if (only_stage == 1 || only_stage == 2) continue;
    if (plan.enabled()) {
      save_checkpoint(plan.branch_dir(Vessel::RCA) / "model.ckpt", model,
                      {{"fold", f}, {"train_config", to_json(cfg)}, {"test_ids", splits[f].test}});
    }
    r.predictions.push_back(predict_dominance_records(select(studies, splits[f].test), model));
    r.reports.push_back(dominance_report(r.predictions.back()));
  }
  if (r.reports.size() >= 2) r.aggregate = metrics::cross_val_aggregate(r.reports);
  return r;
}

template <class T>
DominanceCvResult run_dominance_cv(const std::vector<Study>& studies, const ModelConfig& rca_cfg,
                                   const TrainConfig& cfg, std::size_t k = 5,
                                   const std::filesystem::path& run_dir = {}, int only_stage = 0) {
  const FoldPlan plan = make_folds(dominance_ids(studies), k, cfg.seed);
  DominanceCvResult r = run_dominance_splits<T>(studies, fold_splits(plan), rca_cfg, cfg, run_dir, only_stage);
  r.plan = plan;
  return r;
}

}  // namespace mvl
