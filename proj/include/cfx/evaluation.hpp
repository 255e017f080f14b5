#pragma once

// Explanation metrics (size of S_E, fidelity), the synthetic witness data
// generator, empirical coverage trials and confidence sweeps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cfx/conformal.hpp"
#include "cfx/conformity.hpp"
#include "cfx/dataset.hpp"
#include "cfx/error.hpp"
#include "cfx/parallel.hpp"
#include "cfx/predictor.hpp"
#include "cfx/segmentation.hpp"

namespace cfx {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) return {};
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / n)};
}

// "0.367 ± 0.181"
inline std::string format_mean_std(double mean, double sd, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", digits, mean, digits, sd);
  return buf;
}

inline std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct EvalRow {
  std::string instance_id;
  double size_fraction = 0.0;
  bool matches_full = false;
};

struct EvalReport {
  ConformityKind kind;
  double epsilon = 0.0;
  std::size_t k = 0;
  double threshold = 0.0;
  std::size_t n_test = 0;
  double mean_size = 0.0;
  double std_size = 0.0;
  double fidelity = 0.0;
  std::vector<EvalRow> rows;

  std::string size_summary() const { return format_mean_std(mean_size, std_size); }
};

inline EvalReport summarize(std::vector<EvalRow> rows, const CalibrationArtifact& art) {
  if (rows.empty()) throw UsageError("evaluate: no explanation masks");
  EvalReport r;
  r.kind = art.kind;
  r.epsilon = art.epsilon;
  r.k = art.k;
  r.threshold = art.threshold;
  r.n_test = rows.size();
  std::vector<double> sizes;
  std::size_t matches = 0;
  for (const auto& row : rows) {
    sizes.push_back(row.size_fraction);
    matches += row.matches_full ? 1 : 0;
  }
  const auto ms = mean_std(sizes);
  r.mean_size = ms.mean;
  r.std_size = ms.std;
  r.fidelity = static_cast<double>(matches) / static_cast<double>(rows.size());
  r.rows = std::move(rows);
  return r;
}

inline EvalReport evaluate(std::span<const ExplanationMask> masks, const CalibrationArtifact& art) {
  std::vector<EvalRow> rows;
  rows.reserve(masks.size());
  for (const auto& m : masks) rows.push_back({m.instance_id, m.size_fraction, m.matches_full});
  return summarize(std::move(rows), art);
}

inline EvalReport evaluate(std::span<const MaskRecord> records, const CalibrationArtifact& art) {
  std::vector<EvalRow> rows;
  rows.reserve(records.size());
  for (const auto& m : records) rows.push_back({m.instance_id, m.size_fraction, m.matches_full});
  return summarize(std::move(rows), art);
}

inline const char* kReportCsvHeader = "kind,rho,epsilon,k,n_test,mean_size,std_size,fidelity,threshold";

inline std::string report_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << r.kind.name() << ',' << (r.kind.uses_segmentation() ? format_number(r.kind.rho) : "")
     << ',' << format_number(r.epsilon) << ',' << r.k << ',' << r.n_test << ','
     << format_number(r.mean_size) << ',' << format_number(r.std_size) << ','
     << format_number(r.fidelity) << ',' << format_number(r.threshold);
  return os.str();
}

// --- synthetic witness data ---------------------------------------------------

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Single-channel images whose class is decided by the mean brightness of a
// fixed square region R (see RegionWitnessPredictor). Honest attributions
// rank R's pixels above the background, brighter pixels first, with noise;
// shuffled attributions are a random permutation of the honest scores.
struct WitnessGeneratorConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t region_top = 5;
  std::size_t region_left = 5;
  std::size_t region_size = 6;
  double theta = 0.5;
  double level_lo = 0.25;  // per-instance region brightness range
  double level_hi = 0.95;
  double jitter = 0.15;  // per-pixel variation inside R
  double background_lo = 0.05;
  double background_hi = 0.45;
  double attribution_noise = 0.2;
  bool shuffled = false;
  std::optional<double> speckle_limit;  // see RegionWitnessPredictor

  Extent extent() const { return {height, width}; }

  PixelMask region() const {
    PixelMask r(extent(), false);
    for (std::size_t y = region_top; y < std::min(height, region_top + region_size); ++y) {
      for (std::size_t x = region_left; x < std::min(width, region_left + region_size); ++x) {
        r.set(y * width + x, true);
      }
    }
    return r;
  }

  PredictorPtr predictor() const {
    return std::make_shared<RegionWitnessPredictor>(region(), theta, speckle_limit);
  }
};

inline Instance sample_witness_instance(const WitnessGeneratorConfig& cfg, std::mt19937_64& rng,
                                        const std::string& id) {
  const auto region = cfg.region();
  const std::size_t n = cfg.extent().pixels();
  const double level = uniform(rng, cfg.level_lo, cfg.level_hi);
  std::vector<float> pixels(n), phi(n);
  for (std::size_t p = 0; p < n; ++p) {
    if (region[p]) {
      const double v = std::clamp(level + uniform(rng, -cfg.jitter, cfg.jitter), 0.01, 1.0);
      pixels[p] = static_cast<float>(v);
      phi[p] = static_cast<float>(0.3 + 0.7 * v + cfg.attribution_noise * uniform01(rng));
    } else {
      pixels[p] = static_cast<float>(uniform(rng, cfg.background_lo, cfg.background_hi));
      phi[p] = static_cast<float>((0.3 + cfg.attribution_noise) * uniform01(rng));
    }
  }
  if (cfg.shuffled) {
    const auto perm = seeded_permutation(n, rng());
    std::vector<float> shuffled(n);
    for (std::size_t p = 0; p < n; ++p) shuffled[p] = phi[perm[p]];
    phi = std::move(shuffled);
  }
  Instance inst;
  inst.instance_id = id;
  inst.image = ImageTensor(1, cfg.height, cfg.width, std::move(pixels));
  inst.attribution = AttributionMap(cfg.height, cfg.width, std::move(phi));
  return inst;
}

inline std::vector<Instance> sample_witness_instances(const WitnessGeneratorConfig& cfg,
                                                      std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(sample_witness_instance(cfg, rng, "s" + std::to_string(seed) + "_" + std::to_string(i)));
  }
  return out;
}

// Fills reference predictions and, if requested, SLIC segmentations.
inline void prepare_instances(std::vector<Instance>& instances, const Predictor& h,
                              const SlicParams* slic) {
  std::vector<ImageTensor> images;
  images.reserve(instances.size());
  for (const auto& inst : instances) {
    if (!inst.reference_class) images.push_back(inst.image);
  }
  if (!images.empty() && std::all_of(images.begin(), images.end(),
                                     [&](const ImageTensor& t) { return t.same_shape(images.front()); })) {
    const auto preds = predict_batch(h, images);
    std::size_t j = 0;
    for (auto& inst : instances) {
      if (!inst.reference_class) inst.reference_class = preds[j++].predicted_class;
    }
  } else {
    for (auto& inst : instances) {
      if (!inst.reference_class) inst.reference_class = predict_one(h, inst.image).predicted_class;
    }
  }
  if (slic != nullptr) {
    for (auto& inst : instances) {
      if (!inst.segmentation) inst.segmentation = slic_segment(inst.image, *slic);
    }
  }
}

inline std::vector<ConformityScore> score_all(std::span<const Instance> instances,
                                              const Predictor& h, const ConformityKind& kind,
                                              const ScoringOptions& opt, std::size_t jobs = 1) {
  std::vector<ConformityScore> out(instances.size());
  parallel_for(instances.size(), jobs, [&](std::size_t i) {
    out[i] = score_instance(instances[i].view(), h, kind, opt);
  });
  return out;
}

inline std::vector<ExplanationMask> explain_all(std::span<const Instance> instances,
                                                const CalibrationArtifact& art, const Predictor& h,
                                                const Baseline& baseline, std::size_t jobs = 1) {
  std::vector<ExplanationMask> out(instances.size());
  parallel_for(instances.size(), jobs, [&](std::size_t i) {
    out[i] = explain(instances[i].view(), art, h, baseline);
  });
  return out;
}

// --- coverage trials ----------------------------------------------------------

struct CoverageTrialConfig {
  WitnessGeneratorConfig generator;
  std::size_t k_calibration = 500;
  std::size_t n_test = 1000;
  std::vector<double> epsilons{0.01, 0.05, 0.10, 0.15};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<ConformityKind> kinds{ConformityKind::pixelwise()};
  ScoringOptions scoring;
  SlicParams slic{16, 10.0, 10, 0.25, true};
  bool permute_pool = false;  // shuffle the pooled instances before splitting
  std::size_t jobs = 1;

  void validate() const {
    if (k_calibration < 10) throw UsageError("coverage trial: k_calibration must be >= 10");
    if (n_test < 100) throw UsageError("coverage trial: n_test must be >= 100");
    if (epsilons.empty() || seeds.empty() || kinds.empty()) {
      throw UsageError("coverage trial: need at least one epsilon, seed and kind");
    }
    for (double e : epsilons) {
      if (!(e > 0.0 && e < 1.0)) throw UsageError("coverage trial: epsilon must be in (0,1)");
    }
  }
};

// One-sided tolerance for a per-seed infidelity rate measured on n instances.
inline double coverage_slack(double epsilon, std::size_t n_test) {
  return 3.0 * std::sqrt(epsilon * (1.0 - epsilon) / static_cast<double>(n_test));
}

struct CoverageCell {
  ConformityKind kind;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  double threshold = 0.0;
  double infidelity = 0.0;
  double mean_size = 0.0;
  double bound = 0.0;
  bool within = false;
};

struct CoverageTable {
  std::vector<CoverageCell> cells;  // ordered by seed, kind, epsilon

  double pass_fraction() const {
    if (cells.empty()) return 0.0;
    const auto ok = std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.within; });
    return static_cast<double>(ok) / static_cast<double>(cells.size());
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "kind,rho,epsilon,seed,threshold,infidelity,bound,within,mean_size\n";
    for (const auto& c : cells) {
      os << c.kind.name() << ',' << (c.kind.uses_segmentation() ? format_number(c.kind.rho) : "")
         << ',' << format_number(c.epsilon) << ',' << c.seed << ',' << format_number(c.threshold)
         << ',' << format_number(c.infidelity) << ',' << format_number(c.bound) << ','
         << (c.within ? 1 : 0) << ',' << format_number(c.mean_size) << '\n';
    }
    return os.str();
  }
};

namespace detail {

inline std::vector<CoverageCell> coverage_trial_for_seed(const CoverageTrialConfig& cfg,
                                                         std::uint64_t seed) {
  const auto h = cfg.generator.predictor();
  auto pool = sample_witness_instances(cfg.generator, cfg.k_calibration + cfg.n_test, seed);
  if (cfg.permute_pool) {
    const auto perm = seeded_permutation(pool.size(), seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Instance> shuffled;
    shuffled.reserve(pool.size());
    for (std::size_t i : perm) shuffled.push_back(std::move(pool[i]));
    pool = std::move(shuffled);
  }
  const bool need_seg = std::any_of(cfg.kinds.begin(), cfg.kinds.end(),
                                    [](const auto& k) { return k.uses_segmentation(); });
  prepare_instances(pool, *h, need_seg ? &cfg.slic : nullptr);
  const std::span<const Instance> calibration(pool.data(), cfg.k_calibration);
  const std::span<const Instance> test(pool.data() + cfg.k_calibration, cfg.n_test);

  std::vector<CoverageCell> cells;
  for (const auto& kind : cfg.kinds) {
    const auto scores = score_all(calibration, *h, kind, cfg.scoring);
    if (std::none_of(scores.begin(), scores.end(), [](const auto& s) { return s.valid; })) {
      throw DataError("coverage trial: every calibration score is invalid for kind " + kind.name() +
                      " (seed " + std::to_string(seed) + ")");
    }
    for (double eps : cfg.epsilons) {
      const auto art = calibrate_threshold(scores, eps);
      std::size_t failures = 0;
      double size_sum = 0.0;
      for (const auto& inst : test) {
        const auto keep = explanation_keep(inst.view(), art);
        const auto pred =
            predict_one(*h, apply_baseline_mask(inst.image, keep, cfg.scoring.baseline));
        failures += pred.predicted_class != *inst.reference_class ? 1 : 0;
        size_sum += keep.fraction();
      }
      CoverageCell cell;
      cell.kind = kind;
      cell.epsilon = eps;
      cell.seed = seed;
      cell.threshold = art.threshold;
      cell.infidelity = static_cast<double>(failures) / static_cast<double>(test.size());
      cell.mean_size = size_sum / static_cast<double>(test.size());
      cell.bound = eps + coverage_slack(eps, test.size());
      cell.within = cell.infidelity <= cell.bound;
      cells.push_back(cell);
    }
  }
  return cells;
}

}  // namespace detail

// For each seed: draw k + n instances from the generator, calibrate on the
// first k for every kind and epsilon, explain the remaining n and record the
// fraction whose explanation fails to reproduce the full-input prediction.
inline CoverageTable run_coverage_trial(const CoverageTrialConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<CoverageCell>> per_seed(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.jobs, [&](std::size_t i) {
    per_seed[i] = detail::coverage_trial_for_seed(cfg, cfg.seeds[i]);
  });
  CoverageTable table;
  for (auto& cells : per_seed) table.cells.insert(table.cells.end(), cells.begin(), cells.end());
  return table;
}

// --- confidence sweep ---------------------------------------------------------

struct SweepTable {
  std::vector<EvalReport> rows;  // ordered by kind, then epsilon as given

  std::string to_csv() const {
    std::ostringstream os;
    os << kReportCsvHeader << '\n';
    for (const auto& r : rows) os << report_csv_row(r) << '\n';
    return os.str();
  }
};

// Calibrates every kind on the calibration split and reports size and
// fidelity on the test split for each epsilon.
inline SweepTable confidence_sweep(std::span<const Instance> calibration,
                                   std::span<const Instance> test, const Predictor& h,
                                   std::span<const ConformityKind> kinds,
                                   std::span<const double> epsilons, const ScoringOptions& opt,
                                   std::size_t jobs = 1) {
  if (calibration.empty() || test.empty()) throw UsageError("sweep: empty calibration or test split");
  SweepTable table;
  for (const auto& kind : kinds) {
    const auto scores = score_all(calibration, h, kind, opt, jobs);
    for (double eps : epsilons) {
      auto art = calibrate_threshold(scores, eps);
      art.tau_mode = opt.grid;
      const auto masks = explain_all(test, art, h, opt.baseline, jobs);
      table.rows.push_back(evaluate(masks, art));
    }
  }
  return table;
}

}  // namespace cfx
