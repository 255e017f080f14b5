#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfx/conformity.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace cfx {
namespace {

const ScoringOptions kAllDistinct{TauGridMode::all_distinct(), Baseline::zero()};

std::vector<double> grid_of(std::vector<double> v, TauGridMode mode) {
  return make_tau_grid(std::span<const double>(v), mode);
}

TEST(TauGrid, AllDistinct) {
  EXPECT_EQ(grid_of({3, 1, 4, 2, 4}, TauGridMode::all_distinct()),
            (std::vector<double>{1, 2, 3, 4}));
}

TEST(TauGrid, ConstantCollapses) {
  EXPECT_EQ(grid_of(std::vector<double>(10, 0.7), TauGridMode::quantiles(100)),
            std::vector<double>{0.7});
}

TEST(TauGrid, InterpolatedQuantileLevels) {
  // Sorted sample {0, 10}: position p * (n - 1) = p, value 10 * p.
  const auto g = grid_of({10, 0}, TauGridMode::quantiles(5));
  ASSERT_EQ(g.size(), 5u);
  const std::vector<double> expected{0, 2.5, 5, 7.5, 10};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(g[i], expected[i]);
}

TEST(TauGrid, QuantilesOfLargerSample) {
  // Sample 0..10; the 0.3 quantile sits at position 3 exactly, 0.35 between 3 and 4.
  std::vector<double> s;
  for (int i = 10; i >= 0; --i) s.push_back(i);
  const std::vector<double> sorted{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  EXPECT_DOUBLE_EQ(interpolated_quantile(sorted, 0.3), 3.0);
  EXPECT_DOUBLE_EQ(interpolated_quantile(sorted, 0.35), 3.5);
  const auto lin = grid_of(s, TauGridMode::linspace(3));
  EXPECT_EQ(lin, (std::vector<double>{0, 5, 10}));
}

TEST(TauGrid, ParseNames) {
  EXPECT_EQ(TauGridMode::parse("quantile", 50), TauGridMode::quantiles(50));
  EXPECT_EQ(TauGridMode::parse("all_distinct", 0), TauGridMode::all_distinct());
  EXPECT_THROW(TauGridMode::parse("bogus", 3), UsageError);
}

const std::vector<float> kPhi{0.9f, 0.1f, 0.2f, 0.05f};

std::vector<double> as_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

TEST(Selection, PixelwiseExamples) {
  const auto v = as_double(kPhi);
  const auto m = selection_at_tau(v, {2, 2}, 0.2, ConformityKind::pixelwise());
  EXPECT_TRUE(m[0]);
  EXPECT_FALSE(m[1]);
  EXPECT_TRUE(m[2]);
  EXPECT_FALSE(m[3]);
  EXPECT_EQ(selection_at_tau(v, {2, 2}, 0.95, ConformityKind::pixelwise()).count(), 0u);
}

TEST(Selection, SuperPixelColumns) {
  const SegmentationMap cols({2, 2}, {0, 1, 0, 1}, 2);
  const auto m = selection_at_tau(as_double(kPhi), {2, 2}, 0.2, ConformityKind::super_pixels(0.5),
                                  &cols);
  EXPECT_TRUE(m[0] && m[2]);
  EXPECT_FALSE(m[1] || m[3]);
  EXPECT_THROW(selection_at_tau(as_double(kPhi), {2, 2}, 0.2, ConformityKind::super_pixels()),
               UsageError);
}

TEST(Selection, RequiredCount) {
  EXPECT_EQ(required_count(0.5, 2), 1u);
  EXPECT_EQ(required_count(0.5, 3), 2u);
  EXPECT_EQ(required_count(0.3, 10), 3u);  // 0.3 * 10 is 3.0000000000000004 in doubles
  EXPECT_EQ(required_count(0.01, 5), 1u);
  EXPECT_EQ(required_count(1.0, 7), 7u);
}

TEST(Standardize, ThreeValues) {
  const std::vector<float> phi{2, 4, 6};
  const auto z = standardize(phi);
  // Mean 4, population variance 8/3.
  const double sd = std::sqrt(8.0 / 3.0);
  EXPECT_NEAR(z[0], -2.0 / sd, 1e-12);
  EXPECT_DOUBLE_EQ(z[1], 0.0);
  EXPECT_NEAR(z[2], 2.0 / sd, 1e-12);
  EXPECT_NEAR(z[2], 1.2247, 1e-4);
}

TEST(Standardize, ConstantMapIsZero) {
  const std::vector<float> phi(9, 3.25f);
  for (double v : standardize(phi)) EXPECT_EQ(v, 0.0);
}

struct Fixture2x2 {
  ImageTensor img = test::gray(2, 2, {0.7f, 0.3f, 0.3f, 0.3f});
  AttributionMap phi{2, 2, kPhi};
  RegionWitnessPredictor witness{[] {
                                   PixelMask r({2, 2}, false);
                                   r.set(0, true);
                                   return r;
                                 }(),
                                 0.5};
  InstanceView view() const { return {"x", &img, &phi, nullptr, std::nullopt}; }
};

TEST(ScorePixelwise, WitnessOnSinglePixel) {
  Fixture2x2 f;
  const auto s = score_pixelwise(f.view(), f.witness, kAllDistinct);
  EXPECT_TRUE(s.valid);
  EXPECT_FLOAT_EQ(s.value, 0.9f);
  EXPECT_LE(s.predictor_queries, 5u);
}

TEST(ScorePixelwise, ConstantPredictorGivesMax) {
  Fixture2x2 f;
  test::ConstantPredictor h(1, 2);
  const auto s = score_pixelwise(f.view(), h, kAllDistinct);
  EXPECT_TRUE(s.valid);
  EXPECT_FLOAT_EQ(s.value, 0.9f);
}

TEST(ScorePixelwise, FragileModelOnlyFullSelection) {
  Fixture2x2 f;
  test::FragileFullPredictor h;
  const auto s = score_pixelwise(f.view(), h, kAllDistinct);
  EXPECT_TRUE(s.valid);
  EXPECT_FLOAT_EQ(s.value, 0.05f);
}

TEST(ScorePixelwise, NeverPreservedIsInvalid) {
  Fixture2x2 f;
  test::ConstantPredictor h(0, 2);
  auto v = f.view();
  v.reference_class = 1;  // cached label the model never reproduces
  const auto s = score_pixelwise(v, h, kAllDistinct);
  EXPECT_FALSE(s.valid);
  EXPECT_EQ(s.value, -std::numeric_limits<double>::infinity());
  const auto t = score_summed(v, h, kAllDistinct);
  EXPECT_FALSE(t.valid);
  EXPECT_EQ(t.value, std::numeric_limits<double>::infinity());
}

TEST(ScoreSummed, WitnessPrefixSums) {
  Fixture2x2 f;
  // Preserving thresholds .05, .1, .2, .9 have sums 1.25, 1.2, 1.1, 0.9.
  const auto s = score_summed(f.view(), f.witness, kAllDistinct);
  EXPECT_TRUE(s.valid);
  EXPECT_NEAR(s.value, 0.9, 1e-7);
}

TEST(ScoreSummed, NegativeAttributionsLowerTheSum) {
  const auto img = test::gray(1, 3, {1, 1, 1});
  const AttributionMap phi(1, 3, {0.5f, -0.4f, 0.2f});
  test::ConstantPredictor h(0, 2);
  const auto s = score_summed({"n", &img, &phi, nullptr, std::nullopt}, h, kAllDistinct);
  // Candidate sums: 0.5, 0.7, 0.3; the full selection is the minimum.
  EXPECT_NEAR(s.value, 0.3, 1e-7);
}

TEST(ScoreSuperPixel, WitnessRegionIsOneSegment) {
  // 4x4, left two columns form segment 0 and the witness region.
  std::vector<std::uint32_t> labels(16);
  PixelMask region({4, 4}, false);
  std::vector<float> x(16), phi(16);
  const std::vector<float> left_phi{0.9f, 0.8f, 0.7f, 0.6f, 0.5f, 0.4f, 0.3f, 0.2f};
  const std::vector<float> right_phi{0.95f, 0.85f, 0.1f, 0.12f, 0.14f, 0.16f, 0.18f, 0.11f};
  std::size_t li = 0, ri = 0;
  for (std::size_t p = 0; p < 16; ++p) {
    const bool left = p % 4 < 2;
    labels[p] = left ? 0 : 1;
    region.set(p, left);
    x[p] = left ? 0.8f : 0.2f;
    phi[p] = left ? left_phi[li++] : right_phi[ri++];
  }
  const SegmentationMap seg({4, 4}, labels, 2);
  const auto img = test::gray(4, 4, x);
  const AttributionMap a(4, 4, phi);
  const RegionWitnessPredictor h(region, 0.5);
  const InstanceView v{"sp", &img, &a, &seg, std::nullopt};
  // Segment 0 needs ceil(0.5 * 8) = 4 of its values >= tau: largest such tau is 0.6.
  const auto s = score_superpixel(v, h, 0.5, false, kAllDistinct);
  EXPECT_TRUE(s.valid);
  EXPECT_FLOAT_EQ(s.value, 0.6f);
  // rho = 1 needs every pixel of the segment: 0.2.
  EXPECT_FLOAT_EQ(score_superpixel(v, h, 1.0, false, kAllDistinct).value, 0.2f);
}

TEST(ScoreScaled, ConstantMapSelectsEverything) {
  const auto img = test::gray(2, 2, {1, 1, 1, 1});
  const AttributionMap a(2, 2, {3, 3, 3, 3});
  const SegmentationMap seg({2, 2}, {0, 0, 1, 1}, 2);
  test::FragileFullPredictor h;
  const auto s = score_superpixel({"c", &img, &a, &seg, std::nullopt}, h, 0.5, true,
                                  ScoringOptions{});
  EXPECT_TRUE(s.valid);
  EXPECT_EQ(s.value, 0.0);
}

TEST(ScoreInstance, DimensionMismatchAndMissingSegmentation) {
  const auto img = test::gray(2, 2, {1, 1, 1, 1});
  const AttributionMap a(2, 3, {0, 0, 0, 0, 0, 0});
  test::ConstantPredictor h;
  EXPECT_THROW(score_pixelwise({"m", &img, &a, nullptr, std::nullopt}, h, kAllDistinct),
               DataError);
  const AttributionMap ok(2, 2, {0, 1, 2, 3});
  EXPECT_THROW(score_superpixel({"m", &img, &ok, nullptr, std::nullopt}, h, 0.5, false,
                                kAllDistinct),
               UsageError);
}

TEST(ScoreInstance, QueryBudget) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0, 1);
  for (int t = 0; t < 20; ++t) {
    std::vector<float> x(64), phi(64);
    for (auto& v : x) v = u(rng);
    for (auto& v : phi) v = u(rng);
    const auto img = test::gray(8, 8, x);
    const AttributionMap a(8, 8, phi);
    const test::TablePredictor h(t, 0.3);
    for (std::size_t q : {5u, 20u, 100u}) {
      const auto s = score_pixelwise({"q", &img, &a, nullptr, std::nullopt}, h,
                                     {TauGridMode::quantiles(q), Baseline::zero()});
      ASSERT_LE(s.predictor_queries, q + 1);
    }
  }
}

// Exhaustive oracle agreement on small random instances with a non-monotone model.
TEST(ScoreInstance, MatchesExhaustiveScan) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<float> u(-1, 1);
  for (int t = 0; t < 60; ++t) {
    const std::size_t h = 1 + rng() % 8, w = 1 + rng() % 8;
    std::vector<float> x(h * w), phi(h * w);
    for (auto& v : x) v = u(rng) + 2.0f;
    for (auto& v : phi) v = std::round(u(rng) * 8) / 8;  // frequent ties
    const auto img = test::gray(h, w, x);
    const AttributionMap a(h, w, phi);
    const test::TablePredictor model(1000 + t, 0.4);
    const InstanceView v{"r", &img, &a, nullptr, std::nullopt};
    const auto ref = predict_one(model, img).predicted_class;
    const auto ex = oracle::exhaustive_scan(img, phi, model, ref);
    const auto pw = score_pixelwise(v, model, kAllDistinct);
    const auto sm = score_summed(v, model, kAllDistinct);
    ASSERT_EQ(pw.valid, ex.pixelwise.has_value());
    ASSERT_EQ(sm.valid, ex.summed.has_value());
    if (pw.valid) ASSERT_EQ(pw.value, *ex.pixelwise) << "trial " << t;
    if (sm.valid) ASSERT_EQ(sm.value, *ex.summed) << "trial " << t;
  }
}

TEST(ScoreJson, RoundTrip) {
  test::TempDir dir;
  std::vector<ConformityScore> scores{
      {"a", ConformityKind::pixelwise(), 0.25, true, 3},
      {"b", ConformityKind::super_pixels(0.7), -std::numeric_limits<double>::infinity(), false, 2},
      {"c", ConformityKind::summed_values(), 1.5, true, 1}};
  write_scores_jsonl(scores, dir.path() / "s.jsonl");
  const auto back = read_scores_jsonl(dir.path() / "s.jsonl");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].instance_id, scores[i].instance_id);
    EXPECT_EQ(back[i].kind, scores[i].kind);
    EXPECT_EQ(back[i].valid, scores[i].valid);
    EXPECT_EQ(back[i].value, scores[i].value);
  }
}

}  // namespace
}  // namespace cfx
