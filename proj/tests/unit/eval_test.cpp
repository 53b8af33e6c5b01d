#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fln/error.hpp"
#include "fln/eval.hpp"
#include "fln/fln.hpp"
#include "test_support.hpp"

using namespace fln;
using fln::testing::random_tensor;

namespace {

// Straight from the definition, with no shared helpers.
double oracle(const Tensor& samples, const Tensor& gt, bool final_only) {
  const std::size_t k = samples.dim(0), n = gt.dim(0), t = gt.dim(1);
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double best = INFINITY;
    for (std::size_t i = 0; i < k; ++i) {
      double d = 0.0;
      std::size_t steps = 0;
      for (std::size_t s = final_only ? t - 1 : 0; s < t; ++s, ++steps) {
        const double dx = samples.at({i, a, s, 0}) - gt.at({a, s, 0});
        const double dy = samples.at({i, a, s, 1}) - gt.at({a, s, 1});
        d += std::sqrt(dx * dx + dy * dy);
      }
      best = std::min(best, d / static_cast<double>(steps));
    }
    total += best;
  }
  return total / static_cast<double>(n);
}

BackboneConfig tiny() {
  BackboneConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.ffn_hidden = 8;
  c.decoder_hidden = 8;
  c.modes = 3;
  c.horizon = 4;
  return c;
}

std::vector<TrajectoryScene> probe_scenes(std::size_t n = 40) {
  SyntheticConfig c;
  c.scenes = n;
  c.steps = 12;
  c.seed = 8;
  const auto raw = generate_synthetic(c);
  return normalize(raw, compute_normalization(raw, 7));
}

}  // namespace

TEST(Metrics, MatchBruteForceOracle) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t k = 1 + rep % 6, n = 1 + rep % 4, t = 1 + rep % 12;
    const Tensor s = random_tensor(rng, {k, n, t, 2}, -5, 5, false);
    const Tensor g = random_tensor(rng, {n, t, 2}, -5, 5, false);
    EXPECT_LE(std::abs(ade(s, g) - oracle(s, g, false)), 1e-12);
    EXPECT_LE(std::abs(fde(s, g) - oracle(s, g, true)), 1e-12);
  }
}

TEST(Metrics, MonotoneInK) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 200; ++rep) {
    const Tensor s = random_tensor(rng, {8, 3, 5, 2}, -3, 3, false);
    const Tensor g = random_tensor(rng, {3, 5, 2}, -3, 3, false);
    double prev_ade = INFINITY, prev_fde = INFINITY;
    for (std::size_t k = 1; k <= 8; ++k) {
      const Tensor head = narrow(s, 0, 0, k);
      EXPECT_LE(ade(head, g), prev_ade);
      EXPECT_LE(fde(head, g), prev_fde);
      prev_ade = ade(head, g);
      prev_fde = fde(head, g);
    }
  }
}

TEST(Metrics, SpecialCases) {
  const Tensor g = Tensor::from({1, 2, 2}, {0, 0, 3, 4});
  EXPECT_EQ(ade(reshape(g, {1, 1, 2, 2}), g), 0.0);
  const Tensor s = Tensor::from({1, 1, 2, 2}, {0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(ade(s, g), 2.5);
  EXPECT_DOUBLE_EQ(fde(s, g), 5.0);
  EXPECT_THROW(ade(Tensor::zeros({0, 1, 2, 2}), g), ShapeError);
  EXPECT_THROW(ade(Tensor::zeros({1, 2, 2, 2}), g), ShapeError);
}

TEST(Evaluate, RoutesAndReportsFiniteMetrics) {
  const auto scenes = probe_scenes();
  BranchConfig bc;
  bc.lengths = {2, 5, 8};
  const FlnModel model = make_fln_model(tiny(), bc, 1);
  const EvalWindow window{8, 4};
  for (std::size_t h = 2; h <= 8; ++h) {
    const Metrics m = evaluate(model, scenes, h, window);
    EXPECT_TRUE(std::isfinite(m.ade) && std::isfinite(m.fde));
    ASSERT_TRUE(m.branch.has_value());
    EXPECT_EQ(*m.branch, route(h, bc.lengths));
    EXPECT_EQ(m.scenes, scenes.size());
    EXPECT_EQ(m.samples, 3u);
  }
  EXPECT_THROW(evaluate(model, scenes, 1, window), RoutingError);
  EXPECT_THROW(evaluate(model, scenes, 4, EvalWindow{8, 5}), ShapeError);
}

TEST(Evaluate, MetricsAreInWorldUnits) {
  auto scenes = probe_scenes();
  const FlnModel model(tiny(), BranchLayout::single(4), 2);
  const Metrics base = evaluate(model, scenes, 4, {8, 4});
  // Doubling the normalization scale doubles every reported distance.
  for (auto& s : scenes) s.scale *= 2.0;
  const Metrics scaled = evaluate(model, scenes, 4, {8, 4});
  EXPECT_NEAR(scaled.ade, 2.0 * base.ade, 1e-12);
  EXPECT_NEAR(scaled.fde, 2.0 * base.fde, 1e-12);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  const auto scenes = probe_scenes(80);
  const FlnModel model = make_fln_model(tiny(), BranchConfig{}, 3);
  EvalOptions one;
  one.batch_size = 4;
  one.sampling = SampleMode::stochastic;
  one.seed = 9;
  EvalOptions many = one;
  many.threads = 3;
  const Metrics a = evaluate(model, scenes, 6, {8, 4}, one);
  const Metrics b = evaluate(model, scenes, 6, {8, 4}, many);
  EXPECT_EQ(a.ade, b.ade);
  EXPECT_EQ(a.fde, b.fde);
}

TEST(Evaluate, SingleModelAcceptsShorterAndLongerInputs) {
  const auto scenes = probe_scenes();
  const FlnModel model(tiny(), BranchLayout::single(5), 4);
  for (std::size_t h : {1u, 3u, 5u, 8u}) {
    const Metrics m = evaluate(model, scenes, h, {8, 4});
    EXPECT_TRUE(std::isfinite(m.ade));
    EXPECT_FALSE(m.branch.has_value());
  }
}

TEST(Evaluate, SweepAndSerialization) {
  const auto scenes = probe_scenes();
  const FlnModel model = make_fln_model(tiny(), BranchConfig{}, 5);
  const auto rows = generality_sweep(model, scenes, {3, 4, 5, 6, 7, 8}, {8, 4});
  ASSERT_EQ(rows.size(), 6u);
  const std::string csv = sweep_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "length,branch,samples,ade,fde,scenes,agents");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  const auto j = metrics_json(rows[1].metrics);
  EXPECT_EQ(j["branch"], "M");  // 4 is midway between 2 and 6
  EXPECT_EQ(j["length"], 4);
}

TEST(Probes, LnStatisticsShapeAndSelfGap) {
  const auto scenes = probe_scenes();
  const FlnModel model = make_fln_model(tiny(), BranchConfig{}, 6);
  const auto r = ln_statistics_probe(model, scenes, BranchId::M, 6, {8, 4});
  ASSERT_EQ(r.sites.size(), 2u);
  EXPECT_EQ(r.site("enc0.attn").mean.size(), 6u);
  for (double s : r.site("enc0.ffn").std) EXPECT_GT(s, 0.0);
  EXPECT_EQ(max_mean_gap(r, r), 0.0);
  const auto l = ln_statistics_probe(model, scenes, BranchId::L, 8, {8, 4});
  EXPECT_EQ(max_mean_gap(r, l), max_mean_gap(l, r));
  EXPECT_NE(r.csv().find("enc0.ffn"), std::string::npos);
  EXPECT_THROW(ln_statistics_probe(model, scenes, BranchId::S, 3, {8, 4}), ShapeError);
  EXPECT_THROW(r.site("dec"), std::out_of_range);
}

TEST(Probes, MeanGapAlignsOnTheMostRecentStep) {
  LnStatReport a, b;
  a.sites.push_back({"s", {5.0, 1.0, 2.0}, {1, 1, 1}});
  b.sites.push_back({"s", {1.5, 2.0}, {1, 1}});
  EXPECT_DOUBLE_EQ(max_mean_gap(a, b), 0.5);
}

TEST(Probes, PeDeviationIsZeroExactlyWhenLengthsMatch) {
  BackboneConfig c;
  c.d_model = 16;
  for (std::size_t h1 = 1; h1 <= 12; ++h1) {
    for (std::size_t h2 = 1; h2 <= 12; ++h2) {
      const auto r = pe_deviation_report(c, h1, h2);
      ASSERT_EQ(r.distance.size(), std::min(h1, h2));
      double total = 0.0;
      for (double d : r.distance) total += d;
      if (h1 == h2) {
        EXPECT_EQ(total, 0.0);
      } else {
        for (double d : r.distance) EXPECT_GT(d, 0.0) << h1 << " vs " << h2;
      }
    }
  }
  EXPECT_THROW(pe_deviation_report(c, 0, 3), ShapeError);
}

TEST(Probes, PeDeviationOfLearnedTables) {
  const Tensor a = Tensor::from({2, 2}, {0, 0, 1, 1});
  const Tensor b = Tensor::from({3, 2}, {3, 4, 1, 1, 9, 9});
  const auto r = pe_deviation_report(a, b);
  ASSERT_EQ(r.distance.size(), 2u);
  EXPECT_DOUBLE_EQ(r.distance[0], 5.0);
  EXPECT_DOUBLE_EQ(r.distance[1], 0.0);
  EXPECT_THROW(pe_deviation_report(a, Tensor::zeros({2, 3})), ShapeError);
}
