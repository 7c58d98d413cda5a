#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "mvl/model.hpp"
#include "mvl/synth.hpp"
#include "mvl/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/micro.hpp"

using namespace mvl;
using mvl::testing::micro_config;

namespace {

std::size_t count_params(const nn::ParamList<double>& ps) {
  std::size_t n = 0;
  for (const auto* p : ps) n += p->size();
  return n;
}

template <class T>
std::size_t head_param_count(nn::HeadKind kind, std::size_t embed_dim) {
  nn::FusionHeadConfig cfg;
  cfg.kind = kind;
  auto head = nn::make_head<T>(cfg, embed_dim);
  nn::ParamList<T> ps;
  head->parameters(ps);
  std::size_t n = 0;
  for (const auto* p : ps) n += p->size();
  return n;
}

std::vector<Study> micro_studies(int n) {
  auto cfg = mvl::testing::micro_synth(n);
  cfg.zero_fraction_total = 0.0;
  return synth::gen_studies(cfg);
}

template <class T>
std::vector<T> random_tokens(Rng& rng, std::size_t n) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return v;
}

}  // namespace

TEST(Transform, RoundTripOnScoreRange) {
  for (int i = 0; i <= 10000; ++i) {
    const double s = i * 0.01;
    EXPECT_NEAR(inverse_transform(score_transform(s)), s, 1e-9);
  }
  EXPECT_EQ(score_transform(0.0), 0.0);
  EXPECT_THROW(score_transform(-0.5), ValidationError);
  EXPECT_EQ(inverse_transform(-3.0), 0.0);
}

TEST(Compose, TotalIsExactSumAndScoresAreNonNegative) {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = rng.uniform(-5.0, 5.0), b = rng.uniform(-5.0, 5.0);
    const auto p = compose_prediction("s", a, b, 0.5);
    EXPECT_EQ(p.score_total, p.score_rca + p.score_lca);
    EXPECT_GE(p.score_rca, 0.0);
    EXPECT_GE(p.score_lca, 0.0);
    EXPECT_EQ(p.nonzero, p.score_total > 0.5);
  }
  const auto missing = compose_prediction("s", std::nullopt, std::log1p(4.0), 0.5);
  EXPECT_EQ(missing.score_rca, 0.0);
  EXPECT_NEAR(missing.score_total, 4.0, 1e-12);
  EXPECT_THROW(compose_prediction("s", 0.0, 0.0, std::nan("")), ValidationError);
}

TEST(PredictStudy, CompositionOnGeneratedStudies) {
  const auto studies = micro_studies(3);
  StudyPredictor<float> pred{VesselModel<float>(micro_config(Vessel::RCA, nn::HeadKind::recurrent)),
                             VesselModel<float>(micro_config(Vessel::LCA, nn::HeadKind::attention)), 0.5};
  pred.rca_model.init(1);
  pred.lca_model.init(2);
  for (const auto& s : studies) {
    const auto p = predict_study(s, pred);
    EXPECT_EQ(p.score_total, p.score_rca + p.score_lca);
    EXPECT_GE(p.score_rca, 0.0);
    EXPECT_GE(p.score_lca, 0.0);
    EXPECT_TRUE(p.warnings.empty());
  }
  Study no_rca = studies[0];
  std::erase_if(no_rca.views, [](const View& v) { return v.vessel == Vessel::RCA; });
  const auto p = predict_study(no_rca, pred);
  EXPECT_EQ(p.score_rca, 0.0);
  ASSERT_EQ(p.warnings.size(), 1u);
  EXPECT_NE(p.warnings[0].find("no RCA views"), std::string::npos);
}

TEST(PredictVessel, RejectsWrongVesselAndEmptyInput) {
  const auto studies = micro_studies(1);
  VesselModel<float> m(micro_config(Vessel::LCA, nn::HeadKind::mean));
  m.init(3);
  EXPECT_THROW(predict_vessel({}, m), ValidationError);
  EXPECT_THROW(predict_vessel(views_by_vessel(studies[0], Vessel::RCA), m), ValidationError);
}

TEST(PredictVessel, DominanceProbability) {
  const auto studies = micro_studies(1);
  ModelConfig cfg = micro_config(Vessel::RCA, nn::HeadKind::recurrent);
  cfg.task = Task::dominance;
  VesselModel<float> m(cfg);
  m.init(4);
  const double p = predict_dominance(views_by_vessel(studies[0], Vessel::RCA), m);
  EXPECT_GT(p, 0.0);
  EXPECT_LT(p, 1.0);
  ModelConfig lca = micro_config(Vessel::LCA, nn::HeadKind::recurrent);
  lca.task = Task::dominance;
  EXPECT_THROW(lca.validate(), SchemaError);
}

TEST(Fusion, MeanAndAttentionArePermutationInvariant) {
  Rng rng(23);
  for (nn::HeadKind kind : {nn::HeadKind::mean, nn::HeadKind::attention}) {
    nn::FusionHeadConfig cfg;
    cfg.kind = kind;
    auto head = nn::make_head<float>(cfg, 64);
    head->init(rng);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto n = static_cast<std::size_t>(rng.uniform_int(1, 6));
      std::vector<std::vector<float>> emb;
      for (std::size_t i = 0; i < n; ++i) emb.push_back(random_tokens<float>(rng, 64));
      const auto base = fuse(emb, *head);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      do {
        std::vector<std::vector<float>> shuffled;
        for (auto i : perm) shuffled.push_back(emb[i]);
        const auto out = fuse(shuffled, *head);
        for (std::size_t k = 0; k < out.size(); ++k) worst = std::max(worst, double(std::abs(out[k] - base[k])));
      } while (std::next_permutation(perm.begin(), perm.end()) && n <= 4);
      if (n > 4) {
        for (int r = 0; r < 20; ++r) {
          rng.shuffle(std::span<std::size_t>(perm));
          std::vector<std::vector<float>> shuffled;
          for (auto i : perm) shuffled.push_back(emb[i]);
          const auto out = fuse(shuffled, *head);
          for (std::size_t k = 0; k < out.size(); ++k) worst = std::max(worst, double(std::abs(out[k] - base[k])));
        }
      }
    }
    EXPECT_LE(worst, 1e-5) << nn::to_string(kind);
  }
}

TEST(Fusion, RecurrentHeadDependsOnOrder) {
  Rng rng(29);
  nn::FusionHeadConfig cfg;
  auto head = nn::make_head<double>(cfg, 16);
  head->init(rng);
  std::vector<std::vector<double>> emb{random_tokens<double>(rng, 16), random_tokens<double>(rng, 16)};
  const auto a = fuse(emb, *head);
  std::swap(emb[0], emb[1]);
  EXPECT_NE(a, fuse(emb, *head));
  EXPECT_THROW(fuse<double>({}, *head), ValidationError);
}

TEST(Gradients, FullModelEachHead) {
  const auto studies = micro_studies(2);
  std::vector<const Study*> ptrs{&studies[0], &studies[1]};
  for (nn::HeadKind kind : {nn::HeadKind::mean, nn::HeadKind::recurrent, nn::HeadKind::attention}) {
    VesselModel<double> m(micro_config(Vessel::LCA, kind));
    m.init(7);
    Rng rng(8);
    auto params = m.all_params();
    for (auto* p : params) {
      if (p->name.ends_with("bias")) nn::init_uniform(p->value, rng, 0.1);
    }
    const auto batch = make_study_samples(ptrs, Vessel::LCA, Task::syntax);
    const Loss loss{Task::syntax};
    nn::zero_grad(params);
    study_batch_loss(m, batch, loss, true);
    nn::ParamList<double> checked = m.backbone_params();
    for (auto* p : m.head_params()) checked.push_back(p);
    // A small step keeps the perturbation from crossing ReLU kinks in the backbone.
    const auto res =
        mvl::testing::grad_check(checked, [&] { return study_batch_loss(m, batch, loss, false); }, 7, 1e-6);
    EXPECT_GT(res.checked, 100u);
  }
}

TEST(Gradients, ViewPretrainingPath) {
  const auto studies = micro_studies(2);
  std::vector<const Study*> ptrs{&studies[0], &studies[1]};
  VesselModel<double> m(micro_config(Vessel::LCA, nn::HeadKind::mean));
  m.init(9);
  const auto views = make_view_samples(make_study_samples(ptrs, Vessel::LCA, Task::syntax));
  const Loss loss{Task::syntax};
  auto params = m.all_params();
  nn::zero_grad(params);
  view_batch_loss(m, views, loss, true);
  nn::ParamList<double> checked = m.backbone_params();
  for (auto* p : m.view_head_params()) checked.push_back(p);
  const auto res =
      mvl::testing::grad_check(checked, [&] { return view_batch_loss(m, views, loss, false); }, 7, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst;
}

TEST(Gradients, DominanceLoss) {
  const Loss loss{Task::dominance};
  for (double z : {-3.0, -0.2, 0.0, 1.5, 30.0}) {
    for (double t : {0.0, 1.0}) {
      const double numeric = (loss.value(z + 1e-6, t) - loss.value(z - 1e-6, t)) / 2e-6;
      EXPECT_NEAR(loss.grad(z, t), numeric, 1e-6);
    }
  }
}

TEST(Budgets, HeadParameterCountsAtEmbed512) {
  const double recurrent = static_cast<double>(head_param_count<float>(nn::HeadKind::recurrent, 512));
  const double attention = static_cast<double>(head_param_count<float>(nn::HeadKind::attention, 512));
  EXPECT_NEAR(recurrent / 0.26e6, 1.0, 0.30) << recurrent;
  EXPECT_NEAR(attention / 1.2e6, 1.0, 0.20) << attention;
  EXPECT_EQ(head_param_count<float>(nn::HeadKind::mean, 512), 0u);
}

TEST(Budgets, Tiny3dIsSmall) {
  ModelConfig cfg;
  VesselModel<double> m(cfg);
  EXPECT_EQ(m.backbone().embed_dim(), 64u);
  EXPECT_LT(count_params(m.backbone_params()), 200000u);
}

TEST(Embedding, ShapeMatchesEmbedDim) {
  const auto studies = micro_studies(1);
  VesselModel<float> m(micro_config(Vessel::LCA, nn::HeadKind::mean));
  m.init(1);
  const auto views = views_by_vessel(studies[0], Vessel::LCA);
  const Tensor<float> e = m.embed_views(views);
  EXPECT_EQ(e.shape(), (Shape{views.size(), 16}));
  const auto& b = m.config().backbone;
  const auto clip = normalize<float>(*views[0], sample_frames(*views[0], b.clip_length), b.input_height, b.input_width);
  const auto single = embed_view(clip, m);
  ASSERT_EQ(single.size(), 16u);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(single[k], e[k], 1e-6);
}

TEST(ModelCopy, CloneIsIndependent) {
  VesselModel<double> a(micro_config(Vessel::LCA, nn::HeadKind::recurrent));
  a.init(1);
  VesselModel<double> b = a;
  EXPECT_EQ(parameter_hash(a.all_params()), parameter_hash(b.all_params()));
  b.all_params()[0]->value[0] += 1.0;
  EXPECT_NE(parameter_hash(a.all_params()), parameter_hash(b.all_params()));
}
