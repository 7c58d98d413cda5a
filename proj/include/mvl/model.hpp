#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "mvl/error.hpp"
#include "mvl/nn/backbone.hpp"
#include "mvl/nn/heads.hpp"
#include "mvl/nn/layers.hpp"
#include "mvl/sampler.hpp"
#include "mvl/study.hpp"
#include "mvl/weights.hpp"

namespace mvl {

enum class Task { syntax, dominance };

inline std::string to_string(Task t) { return t == Task::syntax ? "syntax" : "dominance"; }

inline Task task_from_string(const std::string& s) {
  if (s == "syntax") return Task::syntax;
  if (s == "dominance") return Task::dominance;
  throw SchemaError("task must be \"syntax\" or \"dominance\"");
}

/// Regression target: ln(1 + score), finite at score 0.
inline double score_transform(double score) {
  if (!(score >= 0.0)) throw ValidationError("score_transform: negative score");
  return std::log1p(score);
}

inline double inverse_transform(double t) { return std::max(0.0, std::expm1(t)); }

struct ModelConfig {
  Vessel vessel = Vessel::LCA;
  Task task = Task::syntax;
  nn::BackboneConfig backbone;
  nn::FusionHeadConfig head;

  void validate() const {
    backbone.validate();
    head.validate();
    if (task == Task::dominance && vessel != Vessel::RCA) {
      throw SchemaError("dominance models operate on RCA views");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One branch of the network: backbone -> fusion head -> affine output.
/// `view_output` is the single-view head used while pretraining the backbone.
template <class T>
class VesselModel {
 public:
  explicit VesselModel(ModelConfig cfg)
      : cfg_(std::move(cfg)),
        backbone_(nn::make_backbone<T>(cfg_.backbone)),
        head_(nn::make_head<T>(cfg_.head, backbone_->embed_dim())),
        output_("output", head_->output_dim(), 1),
        view_output_("view_output", backbone_->embed_dim(), 1) {
    cfg_.validate();
  }

  VesselModel(const VesselModel& other)
      : cfg_(other.cfg_),
        backbone_(other.backbone_->clone()),
        head_(other.head_->clone()),
        output_(other.output_),
        view_output_(other.view_output_) {}

  VesselModel& operator=(const VesselModel& other) {
    if (this != &other) {
      VesselModel tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  VesselModel(VesselModel&&) noexcept = default;
  VesselModel& operator=(VesselModel&&) noexcept = default;

  void init(std::uint64_t seed) {
    Rng rng(seed);
    backbone_->init(rng);
    if (!cfg_.backbone.pretrained_weights.empty()) load_weights(cfg_.backbone.pretrained_weights, backbone_params());
    head_->init(rng);
    output_.init_default(rng);
    view_output_.init_default(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  Vessel vessel() const { return cfg_.vessel; }

  nn::Backbone<T>& backbone() { return *backbone_; }
  const nn::Backbone<T>& backbone() const { return *backbone_; }
  nn::FusionHead<T>& head() { return *head_; }
  const nn::FusionHead<T>& head() const { return *head_; }
  nn::Linear<T>& output() { return output_; }
  const nn::Linear<T>& output() const { return output_; }
  nn::Linear<T>& view_output() { return view_output_; }
  const nn::Linear<T>& view_output() const { return view_output_; }

  nn::ParamList<T> backbone_params() {
    nn::ParamList<T> out;
    backbone_->parameters(out);
    return out;
  }
  /// Fusion head plus study-level output layer.
  nn::ParamList<T> head_params() {
    nn::ParamList<T> out;
    head_->parameters(out);
    output_.parameters(out);
    return out;
  }
  nn::ParamList<T> view_head_params() {
    nn::ParamList<T> out;
    view_output_.parameters(out);
    return out;
  }
  /// Fixed order: backbone, head, output, view_output.
  nn::ParamList<T> all_params() {
    nn::ParamList<T> out = backbone_params();
    head_->parameters(out);
    output_.parameters(out);
    view_output_.parameters(out);
    return out;
  }

  /// Copies parameter values from a model with the same config. Parameter
  /// objects keep their addresses, so optimizer references stay valid.
  void copy_parameters_from(const VesselModel& other) {
    if (!(other.cfg_ == cfg_)) throw ValidationError("cannot copy parameters between different model configs");
    auto dst = all_params();
    auto src = const_cast<VesselModel&>(other).all_params();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
  }

  /// [N, 3, L, H, W] -> [N, embed_dim], processed in chunks.
  Tensor<T> embed(const Tensor<T>& clips, std::size_t chunk = 16) const {
    const std::size_t n = clips.dim(0), e = backbone_->embed_dim();
    check_clip_shape(clips);
    Tensor<T> out({n, e});
    for (std::size_t s = 0; s < n; s += chunk) {
      const std::size_t m = std::min(chunk, n - s);
      Shape shape = clips.shape();
      shape[0] = m;
      const std::size_t per = clips.size() / n;
      std::vector<T> part(clips.data() + s * per, clips.data() + (s + m) * per);
      Tensor<T> emb = backbone_->forward(Tensor<T>(shape, std::move(part)), nullptr);
      std::copy_n(emb.data(), m * e, out.data() + s * e);
    }
    return out;
  }

  Tensor<T> embed_views(const std::vector<const View*>& views) const {
    const auto& b = cfg_.backbone;
    return embed(make_clip_batch<T>(views, b.clip_length, b.input_height, b.input_width));
  }

  /// Fused study-level output (log-score or dominance logit) from embeddings [L, E].
  T predict_from_embeddings(const Tensor<T>& tokens) const {
    return output_.forward(head_->forward(tokens, nullptr))[0];
  }

  void check_clip_shape(const Tensor<T>& clips) const {
    const auto& b = cfg_.backbone;
    if (clips.rank() != 5 || clips.dim(1) != 3 || clips.dim(2) != b.clip_length || clips.dim(3) != b.input_height ||
        clips.dim(4) != b.input_width) {
      throw ValidationError("clip shape " + shape_str(clips.shape()) + " does not match backbone input [N,3," +
                            std::to_string(b.clip_length) + "," + std::to_string(b.input_height) + "," +
                            std::to_string(b.input_width) + "]");
    }
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<nn::Backbone<T>> backbone_;
  std::unique_ptr<nn::FusionHead<T>> head_;
  nn::Linear<T> output_;
  nn::Linear<T> view_output_;
};

/// Embedding of a single preprocessed clip.
template <class T>
std::vector<T> embed_view(const Clip<T>& clip, const VesselModel<T>& model) {
  Tensor<T> batch = clip.frames;
  Shape s = batch.shape();
  s.insert(s.begin(), 1);
  batch.reshape(s);
  return model.embed(batch).vec();
}

/// Fuses an ordered list of embeddings with the model's head.
template <class T>
std::vector<T> fuse(const std::vector<std::vector<T>>& embeddings, const nn::FusionHead<T>& head) {
  if (embeddings.empty()) throw ValidationError("fuse: empty embedding list");
  const std::size_t d = embeddings.front().size();
  Tensor<T> tokens({embeddings.size(), d});
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].size() != d) throw ValidationError("fuse: embedding dimension mismatch");
    std::copy(embeddings[i].begin(), embeddings[i].end(), tokens.data() + i * d);
  }
  return head.forward(tokens, nullptr).vec();
}

/// Raw study-level output for the views of one vessel: the predicted
/// ln(1 + score) for syntax models, the left-dominance logit otherwise.
template <class T>
T predict_vessel(const std::vector<const View*>& views, const VesselModel<T>& model) {
  if (views.empty()) throw ValidationError("missing vessel views");
  for (const View* v : views) {
    if (v->vessel != model.vessel()) throw ValidationError("view vessel does not match model vessel");
  }
  return model.predict_from_embeddings(model.embed_views(views));
}

/// Probability of left dominance from RCA views.
template <class T>
double predict_dominance(const std::vector<const View*>& rca_views, const VesselModel<T>& model) {
  if (model.config().task != Task::dominance) throw ValidationError("model is not a dominance classifier");
  if (rca_views.empty()) throw ValidationError("missing vessel views");
  return nn::sigmoid(static_cast<double>(predict_vessel(rca_views, model)));
}

template <class T>
struct StudyPredictor {
  VesselModel<T> rca_model;
  VesselModel<T> lca_model;
  double nonzero_threshold = 0.5;

  const VesselModel<T>& model(Vessel v) const { return v == Vessel::RCA ? rca_model : lca_model; }
  VesselModel<T>& model(Vessel v) { return v == Vessel::RCA ? rca_model : lca_model; }
};

struct StudyPrediction {
  std::string study_id;
  double score_rca = 0.0;
  double score_lca = 0.0;
  double score_total = 0.0;
  bool nonzero = false;
  std::optional<double> log_rca;  // absent when the vessel had no views
  std::optional<double> log_lca;
  std::vector<std::string> warnings;
};

/// Combines per-vessel log outputs into scores. Missing vessels score 0.
inline StudyPrediction compose_prediction(std::string study_id, std::optional<double> log_rca,
                                          std::optional<double> log_lca, double threshold) {
  if (!std::isfinite(threshold)) throw ValidationError("nonzero threshold must be finite");
  StudyPrediction p;
  p.study_id = std::move(study_id);
  p.log_rca = log_rca;
  p.log_lca = log_lca;
  p.score_rca = log_rca ? inverse_transform(*log_rca) : 0.0;
  p.score_lca = log_lca ? inverse_transform(*log_lca) : 0.0;
  p.score_total = p.score_rca + p.score_lca;
  p.nonzero = p.score_total > threshold;
  return p;
}

template <class T>
StudyPrediction predict_study(const Study& study, const StudyPredictor<T>& predictor) {
  std::optional<double> logs[2];
  std::vector<std::string> warnings;
  for (Vessel v : {Vessel::RCA, Vessel::LCA}) {
    const auto views = views_by_vessel(study, v);
    if (views.empty()) {
      warnings.push_back(std::string("study ") + study.id + " has no " + to_string(v) + " views; scoring 0");
      spdlog::warn("{}", warnings.back());
      continue;
    }
    logs[v == Vessel::RCA ? 0 : 1] = static_cast<double>(predict_vessel(views, predictor.model(v)));
  }
  StudyPrediction p = compose_prediction(study.id, logs[0], logs[1], predictor.nonzero_threshold);
  p.warnings = std::move(warnings);
  return p;
}

}  // namespace mvl
