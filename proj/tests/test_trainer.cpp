#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "mvl/trainer.hpp"
#include "support/micro.hpp"

using namespace mvl;
using mvl::testing::micro_config;
using mvl::testing::micro_synth;
using mvl::testing::pointers;
namespace fs = std::filesystem;

namespace {

std::vector<LabeledId> synthetic_ids(std::size_t n_zero, std::size_t n_nonzero) {
  std::vector<LabeledId> out;
  for (std::size_t i = 0; i < n_zero + n_nonzero; ++i) out.push_back({"s" + std::to_string(i), i >= n_zero});
  return out;
}

TrainConfig quick_config(std::size_t e1, std::size_t e2, std::size_t e3) {
  TrainConfig tc;
  tc.stages = {{{e1, 8, 3e-3}, {e2, 4, 3e-3}, {e3, 4, 3e-4}}};
  tc.seed = 3;
  return tc;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mvl_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<double> flat_params(VesselModel<float>& m) {
  std::vector<double> out;
  for (const auto* p : m.all_params())
    for (std::size_t i = 0; i < p->size(); ++i) out.push_back(p->value[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Folds

TEST(Folds, HundredStudiesFiveFolds) {
  const auto plan = make_folds(synthetic_ids(52, 48), 5, 1);
  ASSERT_EQ(plan.folds.size(), 5u);
  for (std::size_t f = 0; f < 5; ++f) {
    EXPECT_EQ(plan.folds[f].size(), 20u);
    const double zeros = plan.fold_zero_share[f] * 20.0;
    EXPECT_GE(zeros, 10.0 - 1e-9);
    EXPECT_LE(zeros, 11.0 + 1e-9);
  }
  EXPECT_DOUBLE_EQ(plan.global_zero_share, 0.52);
}

TEST(Folds, FiveHundredSyntheticStudiesAreDisjointAndStratified) {
  synth::SynthConfig cfg;
  cfg.n_studies = 500;
  cfg.seed = 11;
  std::vector<LabeledId> ids;
  for (int i = 0; i < cfg.n_studies; ++i) {
    ids.push_back({synth::study_id(i), *synth::sample_labels(cfg, i).labels.syntax_total > 0.0});
  }
  const auto plan = make_folds(ids, 5, 7);
  std::set<std::string> seen;
  std::size_t total = 0;
  for (std::size_t f = 0; f < 5; ++f) {
    for (const auto& id : plan.folds[f]) EXPECT_TRUE(seen.insert(id).second) << id;
    total += plan.folds[f].size();
    EXPECT_NEAR(plan.fold_zero_share[f], plan.global_zero_share, 0.05);
    const auto train_ids = plan.train_ids(f);
    const std::set<std::string> train(train_ids.begin(), train_ids.end());
    for (const auto& id : plan.test_ids(f)) EXPECT_FALSE(train.count(id));
    EXPECT_EQ(train.size() + plan.test_ids(f).size(), 500u);
  }
  EXPECT_EQ(total, 500u);
  const auto again = make_folds(ids, 5, 7);
  EXPECT_EQ(again.folds, plan.folds);
  EXPECT_NE(make_folds(ids, 5, 8).folds, plan.folds);
}

TEST(Folds, Errors) {
  EXPECT_THROW(make_folds(synthetic_ids(2, 2), 5, 0), ValidationError);
  EXPECT_THROW(make_folds(synthetic_ids(5, 5), 1, 0), ValidationError);
  auto dup = synthetic_ids(3, 3);
  dup.push_back(dup.front());
  EXPECT_THROW(make_folds(dup, 2, 0), ValidationError);
}

TEST(Folds, ValidationSplitIsStratifiedAndDisjoint) {
  const auto ids = synthetic_ids(60, 40);
  const auto [train, val] = split_validation(ids, 0.1, 4);
  EXPECT_EQ(val.size(), 10u);
  EXPECT_EQ(train.size(), 90u);
  std::size_t val_nonzero = 0;
  for (const auto& id : val) val_nonzero += std::stoi(id.substr(1)) >= 60;
  EXPECT_EQ(val_nonzero, 4u);
  std::set<std::string> t(train.begin(), train.end());
  for (const auto& id : val) EXPECT_FALSE(t.count(id));
  EXPECT_EQ(split_validation(ids, 0.1, 4), split_validation(ids, 0.1, 4));
  EXPECT_TRUE(split_validation(ids, 0.0, 4).second.empty());
  const auto h = holdout_split(ids, 0.25, 9);
  EXPECT_EQ(h.test.size(), 25u);
  EXPECT_THROW(holdout_split(synthetic_ids(1, 0), 0.5, 0), ValidationError);
}

// ---------------------------------------------------------------------------
// Threshold

TEST(Threshold, SeparablePredictions) {
  const auto fit = fit_threshold({0.1, 0.2, 5.0, 9.0}, {0, 0, 3, 7});
  EXPECT_GT(fit.tau, 0.2);
  EXPECT_LT(fit.tau, 5.0);
  EXPECT_EQ(*fit.f1_macro, 1.0);
  EXPECT_FALSE(fit.degenerate);
}

TEST(Threshold, ConstantPredictionsUseSmallestTau) {
  const auto fit = fit_threshold({0.0, 0.0, 0.0, 0.0}, {0, 4, 0, 2});
  EXPECT_EQ(fit.tau, 0.0);
  EXPECT_FALSE(fit.degenerate);
}

TEST(Threshold, SingleClassFallsBackToDefault) {
  const auto fit = fit_threshold({0.3, 2.0, 4.0}, {1, 2, 3});
  EXPECT_TRUE(fit.degenerate);
  EXPECT_EQ(fit.tau, 0.5);
  EXPECT_THROW(fit_threshold({1.0}, {1.0, 2.0}), ValidationError);
}

TEST(ThresholdProperty, ChosenTauIsOptimalAmongCandidates) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(4, 30));
    std::vector<double> pred, gt;
    for (std::size_t i = 0; i < n; ++i) {
      gt.push_back(i % 2 ? rng.uniform(1.0, 10.0) : 0.0);
      pred.push_back(rng.uniform(0.0, 8.0));
    }
    const auto fit = fit_threshold(pred, gt);
    std::vector<bool> y;
    for (double g : gt) y.push_back(g > 0.0);
    std::vector<double> sorted = pred;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
      const double tau = 0.5 * (sorted[i] + sorted[i + 1]);
      std::vector<bool> yhat;
      for (double p : pred) yhat.push_back(p > tau);
      EXPECT_LE(metrics::f1_macro(metrics::confusion(y, yhat)).value_or(0.0), *fit.f1_macro + 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// Stages

TEST(Stage1, ConstantZeroTargetIsLearned) {
  auto cfg = micro_synth(8);
  cfg.zero_fraction_total = 1.0;
  const auto studies = synth::gen_studies(cfg);
  VesselModel<float> m(micro_config(Vessel::LCA));
  m.init(1);
  TrainConfig tc = quick_config(5, 1, 1);
  tc.stages[0].lr = 1e-2;
  BranchTrainer<float> t(m, tc, make_study_samples(pointers(studies), Vessel::LCA, Task::syntax));
  const auto h = t.stage1();
  EXPECT_LT(std::sqrt(h.train_loss.back()), 0.05);
}

TEST(Stage1, SmokeLossDecreases) {
  const auto studies = synth::gen_studies(micro_synth(20));
  VesselModel<float> m(micro_config(Vessel::LCA));
  m.init(2);
  const auto samples = make_study_samples(pointers(studies), Vessel::LCA, Task::syntax);
  BranchTrainer<float> t(m, quick_config(2, 1, 1), samples);
  const auto h = t.stage1();
  ASSERT_EQ(h.train_loss.size(), 2u);
  EXPECT_LT(h.train_loss.back(), h.train_loss.front());
  const std::size_t views = make_view_samples(samples).size();
  EXPECT_EQ(h.lr_trace.size(), 2 * ((views + 7) / 8));
}

TEST(Stage1, EmptyTrainingSetIsAnError) {
  VesselModel<float> m(micro_config(Vessel::LCA));
  m.init(1);
  BranchTrainer<float> t(m, quick_config(1, 1, 1), {});
  EXPECT_THROW(t.stage1(), ValidationError);
}

TEST(Stage2, BackboneIsFrozen) {
  const auto studies = synth::gen_studies(micro_synth(12));
  for (nn::HeadKind kind : {nn::HeadKind::mean, nn::HeadKind::recurrent, nn::HeadKind::attention}) {
    VesselModel<float> m(micro_config(Vessel::LCA, kind));
    m.init(3);
    BranchTrainer<float> t(m, quick_config(1, 3, 1), make_study_samples(pointers(studies), Vessel::LCA, Task::syntax));
    t.stage1();
    const auto backbone = parameter_hash(m.backbone_params());
    const auto view_head = parameter_hash(m.view_head_params());
    const auto head = parameter_hash(m.head_params());
    t.stage2();
    EXPECT_EQ(parameter_hash(m.backbone_params()), backbone) << nn::to_string(kind);
    EXPECT_EQ(parameter_hash(m.view_head_params()), view_head);
    EXPECT_NE(parameter_hash(m.head_params()), head);
  }
}

TEST(Stage2, MeanHeadOnlyTrainsOutputLayer) {
  VesselModel<float> m(micro_config(Vessel::LCA, nn::HeadKind::mean));
  const auto params = m.head_params();
  ASSERT_EQ(params.size(), 2u);
  EXPECT_EQ(params[0]->name, "output.weight");
  EXPECT_EQ(params[1]->name, "output.bias");
}

TEST(Stage2, ValidationLossTrendsDown) {
  const auto studies = synth::gen_studies(micro_synth(40));
  std::vector<const Study*> train, val;
  for (std::size_t i = 0; i < studies.size(); ++i) (i % 4 ? train : val).push_back(&studies[i]);
  VesselModel<float> m(micro_config(Vessel::LCA, nn::HeadKind::recurrent));
  m.init(4);
  BranchTrainer<float> t(m, quick_config(3, 6, 1), make_study_samples(train, Vessel::LCA, Task::syntax),
                         make_study_samples(val, Vessel::LCA, Task::syntax));
  t.stage1();
  const auto h = t.stage2();
  EXPECT_LT(*h.best_val, *h.val_metric.front());
  EXPECT_LT(*h.val_metric.back(), *h.val_metric.front());
}

TEST(Stages, OrderIsEnforced) {
  const auto studies = synth::gen_studies(micro_synth(4));
  VesselModel<float> m(micro_config(Vessel::LCA));
  m.init(1);
  BranchTrainer<float> t(m, quick_config(1, 1, 1), make_study_samples(pointers(studies), Vessel::LCA, Task::syntax));
  EXPECT_THROW(t.stage2(), RuntimeError);
  EXPECT_THROW(t.stage3(), RuntimeError);
  t.stage1();
  EXPECT_THROW(t.stage3(), RuntimeError);
}

TEST(Stages, MissingPreviousCheckpointIsAnError) {
  const auto studies = synth::gen_studies(micro_synth(4));
  VesselModel<float> m(micro_config(Vessel::LCA));
  m.init(1);
  const auto samples = make_study_samples(pointers(studies), Vessel::LCA, Task::syntax);
  try {
    train_branch(m, quick_config(1, 1, 1), samples, {}, CheckpointPlan{fresh_dir("missing"), 0}, 2);
    FAIL();
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("missing stage 1 checkpoint"), std::string::npos);
  }
  EXPECT_THROW(train_branch(m, quick_config(1, 1, 1), samples, {}, {}, 4), SchemaError);
}

TEST(Checkpoints, LayoutAndStagewiseRuns) {
  const auto studies = synth::gen_studies(micro_synth(8));
  const auto samples = make_study_samples(pointers(studies), Vessel::LCA, Task::syntax);
  const fs::path run = fresh_dir("layout");
  const TrainConfig tc = quick_config(2, 1, 2);

  VesselModel<float> all(micro_config(Vessel::LCA));
  all.init(5);
  train_branch(all, tc, samples, {}, CheckpointPlan{run / "all", 0});
  for (int s = 1; s <= 3; ++s) {
    for (std::size_t e = 0; e < tc.stage(s).epochs; ++e) {
      EXPECT_TRUE(fs::exists(run / "all" / "LCA" / "fold0" / ("stage" + std::to_string(s)) /
                             ("epoch" + std::to_string(e) + ".ckpt")));
    }
  }

  VesselModel<float> staged(micro_config(Vessel::LCA));
  staged.init(5);
  for (int s = 1; s <= 3; ++s) train_branch(staged, tc, samples, {}, CheckpointPlan{run / "staged", 0}, s);
  EXPECT_EQ(flat_params(staged), flat_params(all));
}

TEST(Checkpoints, ResumeRestoresTrainingStateExactly) {
  const auto studies = synth::gen_studies(micro_synth(10));
  const auto samples = make_study_samples(pointers(studies), Vessel::LCA, Task::syntax);
  const fs::path run = fresh_dir("resume");
  const TrainConfig tc = quick_config(3, 1, 1);

  VesselModel<float> full(micro_config(Vessel::LCA));
  full.init(6);
  BranchTrainer<float> a(full, tc, samples, {}, CheckpointPlan{run, 0});
  const auto ha = a.stage1();

  VesselModel<float> resumed(micro_config(Vessel::LCA));
  resumed.init(99);
  BranchTrainer<float> b(resumed, tc, samples, {}, CheckpointPlan{run / "b", 0});
  const auto hb = b.stage1(run / "LCA" / "fold0" / "stage1" / "epoch0.ckpt");
  EXPECT_EQ(flat_params(resumed), flat_params(full));
  EXPECT_EQ(hb.lr_trace, ha.lr_trace);
  EXPECT_EQ(hb.train_loss, ha.train_loss);

  VesselModel<float> other(micro_config(Vessel::LCA));
  BranchTrainer<float> c(other, tc, samples, {}, {});
  EXPECT_THROW(c.stage2(run / "LCA" / "fold0" / "stage1" / "epoch0.ckpt"), RuntimeError);
}

TEST(Stage3, RetainsBestValidationModel) {
  const auto studies = synth::gen_studies(micro_synth(24));
  std::vector<const Study*> train, val;
  for (std::size_t i = 0; i < studies.size(); ++i) (i % 3 ? train : val).push_back(&studies[i]);
  VesselModel<float> m(micro_config(Vessel::LCA, nn::HeadKind::recurrent));
  m.init(7);
  TrainConfig tc = quick_config(1, 1, 4);
  tc.stages[0].lr = tc.stages[2].lr = 2e-2;
  const auto val_samples = make_study_samples(val, Vessel::LCA, Task::syntax);
  BranchTrainer<float> t(m, tc, make_study_samples(train, Vessel::LCA, Task::syntax), val_samples);
  t.stage1();
  t.stage2();
  const auto h = t.stage3();
  double best = 1e300;
  std::size_t arg = 0;
  for (std::size_t e = 0; e < h.val_metric.size(); ++e) {
    if (*h.val_metric[e] < best) {
      best = *h.val_metric[e];
      arg = e;
    }
  }
  EXPECT_EQ(*h.best_epoch, arg);
  EXPECT_NEAR(std::sqrt(t.study_loss(val_samples)), best, 1e-6);
}

TEST(Predictor, DeterministicUnderFixedSeed) {
  const auto studies = synth::gen_studies(micro_synth(16));
  std::vector<const Study*> train, val;
  for (std::size_t i = 0; i < studies.size(); ++i) (i % 4 ? train : val).push_back(&studies[i]);
  const TrainConfig tc = quick_config(1, 1, 1);
  const auto a = train_predictor<float>(train, val, micro_config(Vessel::RCA), micro_config(Vessel::LCA), tc);
  const auto b = train_predictor<float>(train, val, micro_config(Vessel::RCA), micro_config(Vessel::LCA), tc);
  const auto ra = predict_records(val, a.predictor), rb = predict_records(val, b.predictor);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].pred_total, rb[i].pred_total);
    EXPECT_EQ(ra[i].pred_total, ra[i].pred_rca + ra[i].pred_lca);
  }
  EXPECT_EQ(a.threshold.tau, b.threshold.tau);
  EXPECT_TRUE(a.complete);
}

TEST(Predictor, ConfigMismatchesAreSchemaErrors) {
  const auto studies = synth::gen_studies(micro_synth(4));
  const auto ptrs = pointers(studies);
  EXPECT_THROW(train_predictor<float>(ptrs, {}, micro_config(Vessel::LCA), micro_config(Vessel::LCA),
                                      quick_config(1, 1, 1)),
               SchemaError);
}

TEST(CrossValidation, ReportHasOneRowPerFoldAndAggregate) {
  const auto studies = synth::gen_studies(micro_synth(30));
  const TrainConfig tc = quick_config(1, 1, 1);
  const auto a = run_cv<float>(studies, micro_config(Vessel::RCA), micro_config(Vessel::LCA), tc, 3);
  ASSERT_EQ(a.folds.size(), 3u);
  std::size_t n = 0;
  for (const auto& f : a.folds) {
    EXPECT_TRUE(f.evaluated);
    n += f.predictions.size();
  }
  EXPECT_EQ(n, studies.size());
  const auto j = to_json(a);
  EXPECT_EQ(j.at("folds").size(), 3u);
  EXPECT_TRUE(j.at("aggregate").at("all").contains("r2"));
  const auto b = run_cv<float>(studies, micro_config(Vessel::RCA), micro_config(Vessel::LCA), tc, 3);
  EXPECT_EQ(to_json(b).dump(), j.dump());
}

TEST(Dominance, CrossValidatedClassifier) {
  const auto studies = synth::gen_studies(micro_synth(20));
  ModelConfig cfg = micro_config(Vessel::RCA);
  cfg.task = Task::dominance;
  const auto r = run_dominance_cv<float>(studies, cfg, quick_config(1, 1, 1), 2);
  ASSERT_EQ(r.reports.size(), 2u);
  std::size_t n = 0;
  for (const auto& p : r.predictions) {
    n += p.size();
    for (const auto& rec : p) {
      EXPECT_GE(rec.prob_left, 0.0);
      EXPECT_LE(rec.prob_left, 1.0);
      EXPECT_EQ(rec.pred_left, rec.prob_left > 0.5);
    }
  }
  EXPECT_EQ(n, studies.size());
  EXPECT_THROW(run_dominance_cv<float>(studies, micro_config(Vessel::RCA), quick_config(1, 1, 1), 2), SchemaError);
}
