#pragma once

// Per-instance conformity scores. For an instance x with attributions phi and
// a threshold tau, the selection S(tau) keeps the pixels (or whole
// super-pixels) whose attribution reaches tau; the selection preserves the
// prediction when argmax h(S(tau)) equals argmax h(x).
//
//   pixelwise      sigma = max preserving tau, S(tau) = {j : phi_j >= tau}
//   super_pixels   sigma = max preserving tau, S(tau) = super-pixels with at
//                  least ceil(rho * |segment|) pixels at or above tau
//   scaled_values  as super_pixels on per-instance standardized phi
//   summed_values  sigma = min over preserving tau of sum_{j in S(tau)} phi_j
//
// Candidate thresholds come from a per-instance tau grid. Every grid value is
// evaluated; the preserving set need not be contiguous.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/error.hpp"
#include "cfx/predictor.hpp"
#include "cfx/segmentation.hpp"
#include "cfx/tensor.hpp"

namespace cfx {

enum class ConformityFunction { kPixelwise, kSuperPixels, kScaledValues, kSummedValues };

struct ConformityKind {
  ConformityFunction function = ConformityFunction::kPixelwise;
  double rho = 0.5;  // only meaningful for the super-pixel functions

  static ConformityKind pixelwise() { return {ConformityFunction::kPixelwise, 0.5}; }
  static ConformityKind super_pixels(double rho = 0.5) { return checked({ConformityFunction::kSuperPixels, rho}); }
  static ConformityKind scaled_values(double rho = 0.5) { return checked({ConformityFunction::kScaledValues, rho}); }
  static ConformityKind summed_values() { return {ConformityFunction::kSummedValues, 0.5}; }

  bool uses_segmentation() const noexcept {
    return function == ConformityFunction::kSuperPixels ||
           function == ConformityFunction::kScaledValues;
  }
  bool is_summed() const noexcept { return function == ConformityFunction::kSummedValues; }
  bool standardizes() const noexcept { return function == ConformityFunction::kScaledValues; }

  std::string name() const {
    switch (function) {
      case ConformityFunction::kPixelwise: return "pixelwise";
      case ConformityFunction::kSuperPixels: return "superpixel";
      case ConformityFunction::kScaledValues: return "scaled";
      case ConformityFunction::kSummedValues: return "summed";
    }
    return "?";
  }

  static ConformityKind parse(const std::string& name, double rho = 0.5) {
    if (name == "pixelwise") return pixelwise();
    if (name == "superpixel" || name == "super_pixels") return super_pixels(rho);
    if (name == "scaled" || name == "scaled_values") return scaled_values(rho);
    if (name == "summed" || name == "summed_values") return summed_values();
    throw UsageError("unknown conformity kind '" + name + "'");
  }

  // Kinds compare equal when they select features identically.
  friend bool operator==(const ConformityKind& a, const ConformityKind& b) {
    return a.function == b.function && (!a.uses_segmentation() || a.rho == b.rho);
  }

 private:
  static ConformityKind checked(ConformityKind k) {
    if (!(k.rho > 0.0 && k.rho <= 1.0)) throw UsageError("rho must lie in (0, 1]");
    return k;
  }
};

struct TauGridMode {
  enum class Kind { kQuantileLevels, kAllDistinct, kLinspace };
  Kind kind = Kind::kQuantileLevels;
  std::size_t levels = 100;  // Q, for quantile and linspace grids

  static TauGridMode quantiles(std::size_t q = 100) { return {Kind::kQuantileLevels, q}; }
  static TauGridMode all_distinct() { return {Kind::kAllDistinct, 0}; }
  static TauGridMode linspace(std::size_t q = 100) { return {Kind::kLinspace, q}; }

  std::string name() const {
    switch (kind) {
      case Kind::kQuantileLevels: return "quantile";
      case Kind::kAllDistinct: return "all_distinct";
      case Kind::kLinspace: return "linspace";
    }
    return "?";
  }

  static TauGridMode parse(const std::string& name, std::size_t q) {
    if (name == "quantile") return quantiles(q);
    if (name == "all_distinct") return all_distinct();
    if (name == "linspace") return linspace(q);
    throw UsageError("unknown tau grid mode '" + name + "'");
  }

  friend bool operator==(const TauGridMode&, const TauGridMode&) = default;
};

// Empirical quantile with linear interpolation between order statistics
// (position p * (n - 1) in the sorted sample).
inline double interpolated_quantile(std::span<const double> sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || lo == hi) return sorted[lo];
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

// Sorted, deduplicated candidate thresholds drawn from one instance's scores.
inline std::vector<double> make_tau_grid(std::span<const double> values, TauGridMode mode) {
  if (values.empty()) throw DataError("tau grid: empty attribution map");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> grid;
  switch (mode.kind) {
    case TauGridMode::Kind::kAllDistinct:
      grid = sorted;
      break;
    case TauGridMode::Kind::kQuantileLevels: {
      const std::size_t q = std::max<std::size_t>(mode.levels, 1);
      if (q == 1) {
        grid.push_back(sorted.back());
        break;
      }
      for (std::size_t i = 0; i < q; ++i) {
        const double p = static_cast<double>(i) / static_cast<double>(q - 1);
        grid.push_back(interpolated_quantile(sorted, p));
      }
      break;
    }
    case TauGridMode::Kind::kLinspace: {
      const std::size_t q = std::max<std::size_t>(mode.levels, 1);
      const double lo = sorted.front(), hi = sorted.back();
      if (q == 1) {
        grid.push_back(hi);
        break;
      }
      for (std::size_t i = 0; i < q; ++i) {
        grid.push_back(i + 1 == q ? hi
                                  : lo + (hi - lo) * static_cast<double>(i) /
                                             static_cast<double>(q - 1));
      }
      break;
    }
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

inline std::vector<double> make_tau_grid(std::span<const float> values, TauGridMode mode) {
  std::vector<double> v(values.begin(), values.end());
  return make_tau_grid(std::span<const double>(v), mode);
}

inline constexpr double kStdFloor = 1e-12;

// (phi - mean) / std with the population standard deviation. A (near-)constant
// map standardizes to all zeros.
inline std::vector<double> standardize(std::span<const float> phi) {
  std::vector<double> out(phi.begin(), phi.end());
  if (out.empty()) return out;
  const double n = static_cast<double>(out.size());
  const double mean = std::accumulate(out.begin(), out.end(), 0.0) / n;
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  if (sd < kStdFloor) {
    std::fill(out.begin(), out.end(), 0.0);
    return out;
  }
  for (auto& v : out) v = (v - mean) / sd;
  return out;
}

// The per-pixel values a kind thresholds on: raw attributions, or the
// standardized ones for scaled_values.
inline std::vector<double> working_values(const AttributionMap& phi, const ConformityKind& kind) {
  if (kind.standardizes()) return standardize(phi.scores());
  return {phi.scores().begin(), phi.scores().end()};
}

// Smallest integer count >= rho * size, tolerant of rounding in the product.
inline std::size_t required_count(double rho, std::size_t size) {
  const double target = rho * static_cast<double>(size);
  auto c = static_cast<std::size_t>(std::ceil(target - 1e-9 * std::max(1.0, target)));
  return std::max<std::size_t>(c, 1);
}

inline PixelMask selection_at_tau(std::span<const double> values, Extent extent, double tau,
                                  const ConformityKind& kind,
                                  const SegmentationMap* seg = nullptr) {
  if (values.size() != extent.pixels()) throw DataError("selection: value count mismatch");
  PixelMask mask(extent, false);
  if (!kind.uses_segmentation()) {
    for (std::size_t p = 0; p < values.size(); ++p) mask.set(p, values[p] >= tau);
    return mask;
  }
  if (seg == nullptr) throw UsageError(kind.name() + " conformity requires a segmentation");
  if (seg->extent() != extent) {
    throw DataError("segmentation " + to_string(seg->extent()) + " does not match attributions " +
                    to_string(extent));
  }
  std::vector<std::size_t> hits(seg->num_segments(), 0);
  for (std::size_t p = 0; p < values.size(); ++p) {
    if (values[p] >= tau) ++hits[(*seg)[p]];
  }
  std::vector<bool> chosen(seg->num_segments());
  for (std::size_t s = 0; s < chosen.size(); ++s) {
    chosen[s] = hits[s] >= required_count(kind.rho, seg->segment_size(s));
  }
  for (std::size_t p = 0; p < values.size(); ++p) mask.set(p, chosen[(*seg)[p]]);
  return mask;
}

// Pixel indices by descending value; ties keep ascending pixel order.
inline std::vector<std::size_t> descending_order(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return order;
}

// Signed sum of the selected values, accumulated in descending-value order so
// that it matches the running sums used when building summed-kind masks.
inline double ordered_sum(std::span<const double> values, const PixelMask& selection) {
  double sum = 0.0;
  for (std::size_t p : descending_order(values)) {
    if (selection[p]) sum += values[p];
  }
  return sum;
}

inline double invalid_sentinel(const ConformityKind& kind) {
  return kind.is_summed() ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
}

struct ConformityScore {
  std::string instance_id;
  ConformityKind kind;
  double value = 0.0;  // sentinel (-inf, or +inf for summed) when !valid
  bool valid = false;
  std::size_t predictor_queries = 0;  // not persisted
};

// Everything needed to score (or explain) one instance.
struct InstanceView {
  std::string instance_id;
  const ImageTensor* image = nullptr;
  const AttributionMap* attribution = nullptr;
  const SegmentationMap* segmentation = nullptr;
  std::optional<std::size_t> reference_class;  // argmax h(x) if already known
};

struct ScoringOptions {
  TauGridMode grid = TauGridMode::quantiles();
  Baseline baseline;
};

inline void check_instance(const InstanceView& inst, const ConformityKind& kind) {
  if (inst.image == nullptr || inst.attribution == nullptr) {
    throw UsageError("instance '" + inst.instance_id + "' lacks image or attributions");
  }
  if (inst.attribution->extent() != inst.image->extent()) {
    throw DataError("instance '" + inst.instance_id + "': attribution " +
                    to_string(inst.attribution->extent()) + " vs image " +
                    to_string(inst.image->extent()) + " dimension mismatch");
  }
  if (kind.uses_segmentation()) {
    if (inst.segmentation == nullptr) {
      throw UsageError("instance '" + inst.instance_id + "': " + kind.name() +
                       " conformity requires a segmentation");
    }
    if (inst.segmentation->extent() != inst.image->extent()) {
      throw DataError("instance '" + inst.instance_id + "': segmentation dimension mismatch");
    }
  }
}

// Scores one instance. Queries h at most |grid| + 1 times: once for the
// reference prediction (skipped when cached) and once per distinct selection.
inline ConformityScore score_instance(const InstanceView& inst, const Predictor& h,
                                      const ConformityKind& kind, const ScoringOptions& opt) {
  check_instance(inst, kind);
  ConformityScore out{inst.instance_id, kind, invalid_sentinel(kind), false, 0};
  const Extent extent = inst.image->extent();
  const auto values = working_values(*inst.attribution, kind);
  const auto grid = make_tau_grid(std::span<const double>(values), opt.grid);

  std::size_t reference = 0;
  if (inst.reference_class) {
    reference = *inst.reference_class;
  } else {
    reference = predict_one(h, *inst.image).predicted_class;
    ++out.predictor_queries;
  }

  // Descending scan; consecutive thresholds often select the same pixels.
  std::vector<PixelMask> selections;
  selections.reserve(grid.size());
  for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
    selections.push_back(selection_at_tau(values, extent, *it, kind, inst.segmentation));
  }
  std::vector<std::size_t> distinct_of(selections.size());
  std::vector<std::size_t> distinct;
  for (std::size_t i = 0; i < selections.size(); ++i) {
    if (i > 0 && selections[i] == selections[distinct.back()]) {
      distinct_of[i] = distinct.size() - 1;
      continue;
    }
    distinct.push_back(i);
    distinct_of[i] = distinct.size() - 1;
  }

  std::vector<bool> preserves(distinct.size(), false);
  const std::size_t chunk = std::max<std::size_t>(1, h.batch_limit());
  std::vector<ImageTensor> batch;
  for (std::size_t start = 0; start < distinct.size(); start += chunk) {
    const std::size_t end = std::min(distinct.size(), start + chunk);
    batch.clear();
    for (std::size_t d = start; d < end; ++d) {
      batch.push_back(apply_baseline_mask(*inst.image, selections[distinct[d]], opt.baseline));
    }
    const auto preds = predict_batch(h, batch);
    out.predictor_queries += preds.size();
    for (std::size_t d = start; d < end; ++d) {
      preserves[d] = preds[d - start].predicted_class == reference;
    }
  }

  if (kind.is_summed()) {
    const auto order = descending_order(values);
    std::vector<double> prefix(order.size() + 1, 0.0);
    for (std::size_t i = 0; i < order.size(); ++i) prefix[i + 1] = prefix[i] + values[order[i]];
    for (std::size_t i = 0; i < selections.size(); ++i) {
      if (!preserves[distinct_of[i]]) continue;
      // Pixelwise selections are prefixes of the descending order.
      const double sum = prefix[selections[i].count()];
      if (!out.valid || sum < out.value) out.value = sum;
      out.valid = true;
    }
  } else {
    for (std::size_t i = 0; i < selections.size(); ++i) {
      if (preserves[distinct_of[i]]) {
        out.value = grid[grid.size() - 1 - i];
        out.valid = true;
        break;  // descending scan: first preserving tau is the maximum
      }
    }
  }
  return out;
}

inline ConformityScore score_pixelwise(const InstanceView& inst, const Predictor& h,
                                       const ScoringOptions& opt) {
  return score_instance(inst, h, ConformityKind::pixelwise(), opt);
}

inline ConformityScore score_superpixel(const InstanceView& inst, const Predictor& h,
                                        double rho, bool scaled, const ScoringOptions& opt) {
  return score_instance(
      inst, h, scaled ? ConformityKind::scaled_values(rho) : ConformityKind::super_pixels(rho), opt);
}

inline ConformityScore score_summed(const InstanceView& inst, const Predictor& h,
                                    const ScoringOptions& opt) {
  return score_instance(inst, h, ConformityKind::summed_values(), opt);
}

// --- JSON-lines persistence -------------------------------------------------

inline nlohmann::ordered_json score_to_json(const ConformityScore& s) {
  nlohmann::ordered_json j;
  j["instance_id"] = s.instance_id;
  j["kind"] = s.kind.name();
  if (s.kind.uses_segmentation()) j["rho"] = s.kind.rho;
  if (s.valid) {
    j["value"] = s.value;
  } else {
    j["value"] = nullptr;
  }
  j["valid"] = s.valid;
  return j;
}

inline ConformityScore score_from_json(const nlohmann::json& j) {
  try {
    ConformityScore s;
    s.instance_id = j.at("instance_id").get<std::string>();
    s.kind = ConformityKind::parse(j.at("kind").get<std::string>(), j.value("rho", 0.5));
    s.valid = j.at("valid").get<bool>();
    s.value = s.valid ? j.at("value").get<double>() : invalid_sentinel(s.kind);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("score record: ") + e.what());
  }
}

inline void write_scores_jsonl(std::span<const ConformityScore> scores,
                               const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : scores) out << score_to_json(s).dump() << '\n';
}

inline std::vector<ConformityScore> read_scores_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<ConformityScore> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(score_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cfx
