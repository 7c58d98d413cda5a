#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvl/synth.hpp"

using namespace mvl;
using namespace mvl::synth;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config(int n) {
  SynthConfig cfg;
  cfg.n_studies = n;
  cfg.height = cfg.width = 32;
  cfg.frames = {20, 24};
  cfg.seed = 42;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Mean gray level inside the nominal lumen around the lesion centre.
double lesion_region_mean(const ViewScene& sc, const Video& v) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < v.frames; ++t) {
    const Point c = lesion_center(sc, t);
    for (std::size_t y = 0; y < v.height; ++y)
      for (std::size_t x = 0; x < v.width; ++x) {
        const double dx = x + 0.5 - c.x, dy = y + 0.5 - c.y;
        if (dx * dx + dy * dy > sc.base_radius * sc.base_radius) continue;
        sum += v.at(t, y, x);
        ++n;
      }
  }
  return sum / static_cast<double>(n);
}

}  // namespace

TEST(SeverityToScore, Examples) {
  SynthConfig cfg;
  EXPECT_EQ(severity_to_score(0.0, Vessel::RCA, cfg), 0.0);
  EXPECT_EQ(severity_to_score(1.0, Vessel::LCA, cfg), 61.0);
  EXPECT_EQ(severity_to_score(1.0, Vessel::RCA, cfg), 23.0);
  EXPECT_DOUBLE_EQ(severity_to_score(0.5, Vessel::RCA, cfg), 11.5);
  EXPECT_THROW(severity_to_score(-0.01, Vessel::RCA, cfg), ValidationError);
  EXPECT_THROW(severity_to_score(1.01, Vessel::LCA, cfg), ValidationError);
}

TEST(SeverityToScore, MonotoneAndRoundedToOneDecimal) {
  SynthConfig cfg;
  double prev = 0.0;
  for (int i = 0; i <= 1000; ++i) {
    const double s = severity_to_score(i / 1000.0, Vessel::LCA, cfg);
    EXPECT_GE(s, prev);
    EXPECT_NEAR(s * 10.0, std::round(s * 10.0), 1e-9);
    prev = s;
  }
}

TEST(Config, Validation) {
  EXPECT_NO_THROW(SynthConfig{}.validate());
  auto bad = [](auto mutate) {
    SynthConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](SynthConfig& c) { c.n_studies = 0; }).validate(), SchemaError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.zero_fraction_total = 1.5; }).validate(), SchemaError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.views_lca = {5, 3}; }).validate(), SchemaError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.score_max_rca = 0.0; }).validate(), SchemaError);
  EXPECT_THROW(bad([](SynthConfig& c) { c.view_informativeness = -0.1; }).validate(), SchemaError);
}

TEST(GenStudy, DeterministicPerIndex) {
  const SynthConfig cfg = small_config(10);
  const Study a = gen_study(cfg, 7), b = gen_study(cfg, 7);
  EXPECT_EQ(a.id, b.id);
  EXPECT_EQ(a.labels, b.labels);
  ASSERT_EQ(a.views.size(), b.views.size());
  for (std::size_t i = 0; i < a.views.size(); ++i) EXPECT_EQ(a.views[i].video, b.views[i].video);
  EXPECT_FALSE(gen_study(cfg, 6).views[0].video == a.views[0].video);
  SynthConfig other = cfg;
  other.seed = 43;
  EXPECT_FALSE(gen_study(other, 7).views[0].video == a.views[0].video);
  EXPECT_THROW(gen_study(cfg, 10), ValidationError);
}

TEST(GenStudy, StudiesAreValidWithinTypicalRanges) {
  const SynthConfig cfg = small_config(40);
  for (int i = 0; i < cfg.n_studies; ++i) {
    const Study s = gen_study(cfg, i);
    const auto report = validate_study(s);
    EXPECT_TRUE(report.ok());
    EXPECT_TRUE(labels_consistent(s.labels));
    const auto n_rca = views_by_vessel(s, Vessel::RCA).size(), n_lca = views_by_vessel(s, Vessel::LCA).size();
    EXPECT_GE(n_rca, 1u);
    EXPECT_LE(n_rca, 3u);
    EXPECT_GE(n_lca, 3u);
    EXPECT_LE(n_lca, 5u);
    for (const auto& v : s.views) {
      EXPECT_GE(v.video.frames, 20u);
      EXPECT_LE(v.video.frames, 24u);
      EXPECT_EQ(v.frame_rate, 15);
      const auto [mn, mx] = std::minmax_element(v.video.pixels.begin(), v.video.pixels.end());
      EXPECT_EQ(*mn, 0);
      EXPECT_EQ(*mx, 255);
    }
  }
}

TEST(GenStudy, AllZeroConfiguration) {
  SynthConfig cfg = small_config(30);
  cfg.zero_fraction_total = 1.0;
  for (int i = 0; i < cfg.n_studies; ++i) EXPECT_EQ(*sample_labels(cfg, i).labels.syntax_total, 0.0);
}

TEST(GenStudy, DiseasedVesselHasAnInformativeView) {
  SynthConfig cfg = small_config(60);
  cfg.view_informativeness = 0.05;
  for (int i = 0; i < cfg.n_studies; ++i) {
    const auto g = gen_study_detailed(cfg, i);
    for (Vessel v : {Vessel::RCA, Vessel::LCA}) {
      bool any = false;
      for (std::size_t k = 0; k < g.study.views.size(); ++k) {
        if (g.study.views[k].vessel == v) any = any || g.informative[k];
      }
      if (g.severity.of(v) > 0.0) EXPECT_TRUE(any) << g.study.id;
    }
  }
}

TEST(DrawInformative, ForcesExactlyOneWhenNoneDrawn) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto flags = draw_informative(rng, 4, 0.7, 0.0);
    EXPECT_EQ(std::count(flags.begin(), flags.end(), true), 1);
    const auto healthy = draw_informative(rng, 4, 0.0, 0.0);
    EXPECT_EQ(std::count(healthy.begin(), healthy.end(), true), 0);
  }
}

TEST(Scene, ConstrictionFollowsSeverityAndInformativeness) {
  const SynthConfig cfg;
  Rng g(5);
  const StudyGeometry geo = sample_geometry(g);
  auto scene = [&](Vessel v, double sev, bool informative) {
    Rng rng(9);
    return make_scene(cfg, geo, rng, 32, v, sev, informative, true);
  };
  EXPECT_EQ(scene(Vessel::RCA, 0.0, true).constriction, 0.0);
  EXPECT_EQ(scene(Vessel::RCA, 0.0, false).constriction, 0.0);
  EXPECT_EQ(scene(Vessel::LCA, 1.0, true).constriction, cfg.max_constriction_depth);
  EXPECT_EQ(scene(Vessel::LCA, 1.0, false).constriction, 0.0);
  EXPECT_DOUBLE_EQ(scene(Vessel::LCA, 0.5, true).constriction, 0.5 * cfg.max_constriction_depth);
}

TEST(Scene, InformativeViewsDifferInTheLesionRegion) {
  const SynthConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng g(seed);
    const StudyGeometry geo = sample_geometry(g);
    for (double severity : {0.5, 0.75, 1.0}) {
      Rng r1(seed + 100), r2(seed + 100);
      const ViewScene lesion = make_scene(cfg, geo, r1, 32, Vessel::LCA, severity, true, true);
      const ViewScene clean = make_scene(cfg, geo, r2, 32, Vessel::LCA, severity, false, true);
      const double diff = lesion_region_mean(lesion, render_view(lesion)) - lesion_region_mean(clean, render_view(clean));
      EXPECT_GE(diff, 20.0) << "seed " << seed << " severity " << severity;
    }
  }
}

TEST(Distribution, ZeroSharesOnFiveHundredStudies) {
  SynthConfig cfg;
  cfg.n_studies = 500;
  int zero_total = 0, zero_rca = 0, zero_lca = 0;
  for (int i = 0; i < cfg.n_studies; ++i) {
    const Labels l = sample_labels(cfg, i).labels;
    zero_total += *l.syntax_total == 0.0;
    zero_rca += *l.syntax_rca == 0.0;
    zero_lca += *l.syntax_lca == 0.0;
    EXPECT_LE(*l.syntax_rca, 23.0);
    EXPECT_LE(*l.syntax_lca, 61.0);
  }
  EXPECT_GE(zero_total / 500.0, 0.47);
  EXPECT_LE(zero_total / 500.0, 0.57);
  EXPECT_NEAR(zero_rca / 500.0, 0.883, 0.05);
  EXPECT_NEAR(zero_lca / 500.0, 0.65, 0.05);
}

TEST(Distribution, ConditionalSharesKeepSomeStudiesWithBothVesselsDiseased) {
  SynthConfig cfg;
  const auto [a, b] = conditional_zero_shares(cfg);
  EXPECT_NEAR(a + b, 1.0 - kMinBothDiseased, 1e-12);
  cfg.zero_fraction_rca = 0.6;
  cfg.zero_fraction_lca = 0.6;
  const auto [c, d] = conditional_zero_shares(cfg);
  EXPECT_NEAR(c, 0.08 / 0.48, 1e-12);
  EXPECT_NEAR(d, 0.08 / 0.48, 1e-12);
}

TEST(GenDataset, ByteIdenticalAcrossRuns) {
  const SynthConfig cfg = small_config(4);
  const fs::path root = fs::temp_directory_path() / "mvl_test_synth";
  fs::remove_all(root);
  const Manifest a = gen_dataset(cfg, root / "a");
  gen_dataset(cfg, root / "b");
  EXPECT_EQ(slurp(root / "a" / "manifest.json"), slurp(root / "b" / "manifest.json"));
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    EXPECT_EQ(slurp(e.path()), slurp(root / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 4u * 4u * 20u);
  const auto loaded = load_studies(load_manifest(root / "a" / "manifest.json"));
  ASSERT_EQ(loaded.size(), 4u);
  EXPECT_EQ(loaded[2].views[0].video, gen_study(cfg, 2).views[0].video);
  EXPECT_EQ(a.studies[3].labels, loaded[3].labels);
}

TEST(GenDataset, UnwritableDirectoryIsRuntimeError) {
  const fs::path blocker = fs::temp_directory_path() / "mvl_test_synth_blocker";
  fs::remove_all(blocker);
  std::ofstream(blocker) << "x";
  EXPECT_THROW(gen_dataset(small_config(1), blocker / "sub"), RuntimeError);
  fs::remove(blocker);
}
