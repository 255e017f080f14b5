#include <gtest/gtest.h>

#include <random>

#include "cfx/evaluation.hpp"
#include "test_util.hpp"

namespace cfx {
namespace {

CalibrationArtifact pixelwise_artifact(double eps) {
  CalibrationArtifact a;
  a.kind = ConformityKind::pixelwise();
  a.epsilon = eps;
  return a;
}

TEST(Metrics, MeanAndPopulationStd) {
  const std::vector<double> xs{0.2, 0.4};
  const auto ms = mean_std(xs);
  EXPECT_NEAR(ms.mean, 0.3, 1e-15);
  EXPECT_NEAR(ms.std, 0.1, 1e-15);
  EXPECT_EQ(format_mean_std(0.367, 0.181), "0.367 ± 0.181");
  EXPECT_EQ(format_number(-std::numeric_limits<double>::infinity()), "-inf");
}

TEST(Metrics, FidelityAndSize) {
  std::vector<ExplanationMask> masks(4);
  for (std::size_t i = 0; i < 4; ++i) {
    masks[i].instance_id = std::to_string(i);
    masks[i].size_fraction = 0.25 * double(i + 1);
    masks[i].matches_full = true;
  }
  auto r = evaluate(masks, pixelwise_artifact(0.1));
  EXPECT_EQ(r.fidelity, 1.0);
  EXPECT_EQ(r.n_test, 4u);
  EXPECT_NEAR(r.mean_size, 0.625, 1e-15);
  masks[3].matches_full = false;
  r = evaluate(masks, pixelwise_artifact(0.1));
  EXPECT_EQ(r.fidelity, 0.75);
  EXPECT_EQ(report_csv_row(r).substr(0, 21), "pixelwise,,0.100000,0");
  EXPECT_THROW(evaluate(std::vector<ExplanationMask>{}, pixelwise_artifact(0.1)), UsageError);
}

TEST(Generator, SeededAndWellFormed) {
  WitnessGeneratorConfig cfg;
  const auto a = sample_witness_instances(cfg, 20, 9);
  const auto b = sample_witness_instances(cfg, 20, 9);
  const auto region = cfg.region();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].image, b[i].image);
    ASSERT_EQ(a[i].attribution, b[i].attribution);
    for (float v : a[i].image.values()) ASSERT_GT(v, 0.0f);
    // Honest attributions: every region pixel outranks the background mean.
    double bg = 0.0;
    double rmin = 1e9;
    for (std::size_t p = 0; p < region.size(); ++p) {
      if (region[p]) {
        rmin = std::min(rmin, double(a[i].attribution[p]));
      } else {
        bg += a[i].attribution[p];
      }
    }
    EXPECT_GT(rmin, bg / double(region.size() - region.count()));
  }
  EXPECT_NE(sample_witness_instances(cfg, 1, 10)[0].image, a[0].image);
}

TEST(Generator, WitnessScoresAreValid) {
  WitnessGeneratorConfig cfg;
  auto inst = sample_witness_instances(cfg, 30, 4);
  const auto h = cfg.predictor();
  const SlicParams slic{16, 10.0, 10, 0.25, true};
  prepare_instances(inst, *h, &slic);
  for (const auto& kind : {ConformityKind::pixelwise(), ConformityKind::super_pixels(),
                           ConformityKind::scaled_values(), ConformityKind::summed_values()}) {
    for (const auto& s : score_all(inst, *h, kind, ScoringOptions{})) {
      ASSERT_TRUE(s.valid) << kind.name() << " " << s.instance_id;
    }
  }
}

TEST(Calibration, OrderOfCalibrationScoresIrrelevant) {
  WitnessGeneratorConfig cfg;
  auto inst = sample_witness_instances(cfg, 60, 21);
  const auto h = cfg.predictor();
  prepare_instances(inst, *h, nullptr);
  auto scores = score_all(inst, *h, ConformityKind::pixelwise(), ScoringOptions{});
  const auto reference = calibrate_threshold(scores, 0.1).threshold;
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) {
    std::shuffle(scores.begin(), scores.end(), rng);
    ASSERT_EQ(calibrate_threshold(scores, 0.1).threshold, reference);
  }
}

CoverageTrialConfig small_trial() {
  CoverageTrialConfig cfg;
  cfg.k_calibration = 100;
  cfg.n_test = 200;
  cfg.seeds = {3, 4};
  cfg.epsilons = {0.05, 0.2};
  cfg.kinds = {ConformityKind::pixelwise(), ConformityKind::super_pixels()};
  cfg.scoring.grid = TauGridMode::quantiles(30);
  return cfg;
}

TEST(Coverage, DeterministicTables) {
  auto cfg = small_trial();
  const auto a = run_coverage_trial(cfg);
  cfg.jobs = 2;
  const auto b = run_coverage_trial(cfg);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  ASSERT_EQ(a.cells.size(), 8u);
  EXPECT_EQ(a.cells[0].seed, 3u);
}

TEST(Coverage, TinyEpsilonIsConservative) {
  auto cfg = small_trial();
  cfg.epsilons = {0.001, 0.2};
  const auto t = run_coverage_trial(cfg);
  for (std::size_t i = 0; i + 1 < t.cells.size(); i += 2) {
    EXPECT_GE(t.cells[i].mean_size, t.cells[i + 1].mean_size);
    EXPECT_LE(t.cells[i].infidelity, 0.03);
  }
}

TEST(Coverage, RejectsBadConfig) {
  auto cfg = small_trial();
  cfg.k_calibration = 3;
  EXPECT_THROW(run_coverage_trial(cfg), UsageError);
  cfg = small_trial();
  cfg.epsilons = {1.5};
  EXPECT_THROW(run_coverage_trial(cfg), UsageError);
}

TEST(Sweep, SizesGrowWithConfidence) {
  WitnessGeneratorConfig gen;
  auto pool = sample_witness_instances(gen, 160, 77);
  const auto h = gen.predictor();
  const SlicParams slic{16, 10.0, 10, 0.25, true};
  prepare_instances(pool, *h, &slic);
  const std::span<const Instance> cal(pool.data(), 80), test(pool.data() + 80, 80);
  const std::vector<ConformityKind> kinds{ConformityKind::pixelwise(),
                                          ConformityKind::super_pixels()};
  const std::vector<double> eps{0.15, 0.10, 0.05, 0.01};
  const auto table = confidence_sweep(cal, test, *h, kinds, eps, ScoringOptions{});
  ASSERT_EQ(table.rows.size(), 8u);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 1; i < 4; ++i) {
      EXPECT_GE(table.rows[k * 4 + i].mean_size, table.rows[k * 4 + i - 1].mean_size);
    }
  }
  EXPECT_EQ(table.to_csv().substr(0, std::string(kReportCsvHeader).size()), kReportCsvHeader);
}

}  // namespace
}  // namespace cfx
