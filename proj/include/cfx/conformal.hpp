#pragma once

// Split-conformal calibration of the global threshold and construction of
// sufficient explanation masks for new instances.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/conformity.hpp"
#include "cfx/error.hpp"
#include "cfx/predictor.hpp"
#include "cfx/tensor_io.hpp"

namespace cfx {

struct CalibrationArtifact {
  ConformityKind kind;
  double epsilon = 0.05;
  std::size_t k = 0;
  double threshold = 0.0;
  bool sentinel = false;  // threshold is the "select everything" value
  TauGridMode tau_mode;
  std::string slic_digest;
  std::string manifest_digest;

  double confidence() const noexcept { return 1.0 - epsilon; }
};

// Smallest c in [0, k] with (c + 1) / (k + 1) >= 1 - epsilon.
inline std::size_t required_conforming(double epsilon, std::size_t k) {
  const double target = 1.0 - epsilon;
  // Counts are integers; the slack absorbs rounding in products like 0.9 * 10.
  auto ok = [&](std::size_t c) {
    return static_cast<double>(c + 1) >= target * static_cast<double>(k + 1) - 1e-9;
  };
  const double estimate = std::ceil(target * static_cast<double>(k + 1)) - 1.0;
  std::size_t c = estimate <= 0.0 ? 0 : std::min(k, static_cast<std::size_t>(estimate));
  while (c > 0 && ok(c - 1)) --c;
  while (c < k && !ok(c)) ++c;
  return c;
}

// Threshold kinds: the largest score s with #{sigma_i >= s} + 1 >= (1-eps)(k+1).
// Summed kind: the smallest score s with #{sigma_i <= s} + 1 >= (1-eps)(k+1).
// Candidates are the observed scores themselves, sentinels included.
inline CalibrationArtifact calibrate_threshold(std::span<const ConformityScore> scores,
                                               double epsilon) {
  if (scores.empty()) throw UsageError("calibrate: no conformity scores");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw UsageError("calibrate: epsilon must be in (0,1)");
  const ConformityKind kind = scores.front().kind;
  std::vector<double> values;
  values.reserve(scores.size());
  for (const auto& s : scores) {
    if (!(s.kind == kind)) {
      throw UsageError("calibrate: mixed conformity kinds (" + kind.name() + " and " +
                       s.kind.name() + ")");
    }
    values.push_back(s.value);
  }

  CalibrationArtifact art;
  art.kind = kind;
  art.epsilon = epsilon;
  art.k = values.size();
  const std::size_t c = std::max<std::size_t>(1, required_conforming(epsilon, art.k));
  if (kind.is_summed()) {
    std::sort(values.begin(), values.end());
  } else {
    std::sort(values.begin(), values.end(), std::greater<>());
  }
  art.threshold = values[c - 1];
  art.sentinel = std::isinf(art.threshold);
  art.threshold = art.sentinel ? invalid_sentinel(kind) : art.threshold;
  return art;
}

struct ExplanationMask {
  std::string instance_id;
  PixelMask keep;
  double size_fraction = 0.0;
  std::size_t reproduced_class = 0;
  std::size_t full_class = 0;
  bool matches_full = false;
};

// The kept pixels for one instance under a calibrated artifact, without
// querying the predictor.
inline PixelMask explanation_keep(const InstanceView& inst, const CalibrationArtifact& art) {
  check_instance(inst, art.kind);
  const Extent extent = inst.image->extent();
  if (art.sentinel) return PixelMask(extent, true);
  const auto values = working_values(*inst.attribution, art.kind);
  if (!art.kind.is_summed()) {
    return selection_at_tau(values, extent, art.threshold, art.kind, inst.segmentation);
  }
  // Longest prefix of the descending order whose running sum stays within
  // the threshold; stops at the first pixel that pushes it over.
  PixelMask keep(extent, false);
  double running = 0.0;
  for (std::size_t p : descending_order(values)) {
    running += values[p];
    if (running > art.threshold) break;
    keep.set(p, true);
  }
  return keep;
}

inline ExplanationMask explain(const InstanceView& inst, const CalibrationArtifact& art,
                               const Predictor& h, const Baseline& baseline = Baseline::zero()) {
  ExplanationMask out;
  out.instance_id = inst.instance_id;
  out.keep = explanation_keep(inst, art);
  out.size_fraction = out.keep.fraction();
  out.full_class = inst.reference_class ? *inst.reference_class
                                        : predict_one(h, *inst.image).predicted_class;
  out.reproduced_class =
      predict_one(h, apply_baseline_mask(*inst.image, out.keep, baseline)).predicted_class;
  out.matches_full = out.reproduced_class == out.full_class;
  return out;
}

inline void require_same_provenance(std::span<const CalibrationArtifact> arts) {
  for (const auto& a : arts) {
    const auto& f = arts.front();
    if (!(a.kind == f.kind)) throw UsageError("artifacts mix conformity kinds");
    if (a.slic_digest != f.slic_digest || a.manifest_digest != f.manifest_digest ||
        !(a.tau_mode == f.tau_mode)) {
      throw UsageError("artifacts come from different calibration runs");
    }
  }
}

// One mask per artifact (e.g. one per confidence level), in input order. For
// threshold kinds higher-confidence masks contain lower-confidence ones.
inline std::vector<ExplanationMask> nested_masks(const InstanceView& inst,
                                                 std::span<const CalibrationArtifact> arts,
                                                 const Predictor& h,
                                                 const Baseline& baseline = Baseline::zero()) {
  require_same_provenance(arts);
  InstanceView view = inst;
  if (!view.reference_class) view.reference_class = predict_one(h, *inst.image).predicted_class;
  std::vector<ExplanationMask> out;
  out.reserve(arts.size());
  for (const auto& a : arts) out.push_back(explain(view, a, h, baseline));
  return out;
}

// Fails loudly when inference is configured differently from calibration.
inline void check_artifact_matches(const CalibrationArtifact& art, const std::string& slic_digest,
                                   const std::string& manifest_digest) {
  if (art.kind.uses_segmentation() && art.slic_digest != slic_digest) {
    throw UsageError("calibration used SLIC config " + art.slic_digest + ", inference uses " +
                     slic_digest);
  }
  if (art.manifest_digest != manifest_digest) {
    throw UsageError("calibration artifact was built from a different manifest/split (" +
                     art.manifest_digest + " vs " + manifest_digest + ")");
  }
}

// --- persistence -------------------------------------------------------------

inline nlohmann::ordered_json artifact_to_json(const CalibrationArtifact& a) {
  nlohmann::ordered_json j;
  j["kind"] = a.kind.name();
  j["rho"] = a.kind.rho;
  j["epsilon"] = a.epsilon;
  j["k"] = a.k;
  if (a.sentinel) {
    j["threshold"] = nullptr;
  } else {
    j["threshold"] = a.threshold;
  }
  j["tau_mode"] = a.tau_mode.name();
  j["q"] = a.tau_mode.levels;
  j["slic_digest"] = a.slic_digest;
  j["manifest_digest"] = a.manifest_digest;
  j["sentinel"] = a.sentinel;
  return j;
}

inline CalibrationArtifact artifact_from_json(const nlohmann::json& j) {
  try {
    CalibrationArtifact a;
    a.kind = ConformityKind::parse(j.at("kind").get<std::string>(), j.value("rho", 0.5));
    a.epsilon = j.at("epsilon").get<double>();
    a.k = j.at("k").get<std::size_t>();
    a.sentinel = j.at("sentinel").get<bool>();
    a.threshold = a.sentinel ? invalid_sentinel(a.kind) : j.at("threshold").get<double>();
    a.tau_mode = TauGridMode::parse(j.at("tau_mode").get<std::string>(), j.value("q", std::size_t{100}));
    a.slic_digest = j.value("slic_digest", std::string{});
    a.manifest_digest = j.value("manifest_digest", std::string{});
    if (!(a.epsilon > 0.0 && a.epsilon < 1.0) || a.k == 0) {
      throw DataError("calibration artifact: epsilon/k out of range");
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("calibration artifact: ") + e.what());
  }
}

inline void write_artifact(const CalibrationArtifact& a, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << artifact_to_json(a).dump(2) << '\n';
}

inline CalibrationArtifact read_artifact(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return artifact_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline nlohmann::ordered_json mask_record(const ExplanationMask& m) {
  nlohmann::ordered_json j;
  j["instance_id"] = m.instance_id;
  j["size_fraction"] = m.size_fraction;
  j["reproduced_class"] = m.reproduced_class;
  j["matches_full"] = m.matches_full;
  return j;
}

// Masks are stored as HxW CFXT tensors holding 0.0 / 1.0.
inline void write_mask_tensor(const PixelMask& keep, const std::filesystem::path& path) {
  RawTensor raw{{static_cast<std::uint32_t>(keep.extent().height),
                 static_cast<std::uint32_t>(keep.extent().width)},
                {}};
  raw.data.reserve(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) raw.data.push_back(keep[i] ? 1.0f : 0.0f);
  write_tensor(raw, path);
}

inline PixelMask read_mask_tensor(const std::filesystem::path& path) {
  const auto raw = read_tensor(path);
  if (raw.dims.size() != 2) throw DataError(path.string() + ": mask must be HxW");
  std::vector<std::uint8_t> bits;
  bits.reserve(raw.data.size());
  for (float v : raw.data) {
    if (v != 0.0f && v != 1.0f) throw DataError(path.string() + ": mask values must be 0 or 1");
    bits.push_back(v != 0.0f ? 1 : 0);
  }
  return PixelMask(Extent{raw.dims[0], raw.dims[1]}, std::move(bits));
}

struct MaskRecord {
  std::string instance_id;
  double size_fraction = 0.0;
  std::size_t reproduced_class = 0;
  bool matches_full = false;
};

inline std::vector<MaskRecord> read_mask_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<MaskRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("instance_id").get<std::string>(), j.at("size_fraction").get<double>(),
                     j.at("reproduced_class").get<std::size_t>(), j.at("matches_full").get<bool>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cfx
