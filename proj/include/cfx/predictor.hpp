#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/error.hpp"
#include "cfx/tensor.hpp"
#include "cfx/tensor_io.hpp"

namespace cfx {

// Black-box classifier h. Implementations receive batches no larger than
// batch_limit() whose tensors all share one shape; use predict_batch() to call.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::size_t num_classes() const = 0;
  virtual std::size_t batch_limit() const { return 256; }
  virtual std::vector<PredictionVector> predict(std::span<const ImageTensor> batch) const = 0;
};

using PredictorPtr = std::shared_ptr<const Predictor>;

// Evaluates any number of same-shaped images, splitting into chunks of at
// most h.batch_limit(). Output order follows input order.
inline std::vector<PredictionVector> predict_batch(const Predictor& h,
                                                   std::span<const ImageTensor> batch) {
  std::vector<PredictionVector> out;
  if (batch.empty()) return out;
  for (const auto& t : batch) {
    if (!t.same_shape(batch.front())) throw DataError("predict_batch: dimension mismatch in batch");
  }
  const std::size_t limit = std::max<std::size_t>(1, h.batch_limit());
  out.reserve(batch.size());
  for (std::size_t start = 0; start < batch.size(); start += limit) {
    const auto chunk = batch.subspan(start, std::min(limit, batch.size() - start));
    auto part = h.predict(chunk);
    if (part.size() != chunk.size()) {
      throw TransportError("predictor returned " + std::to_string(part.size()) +
                           " predictions for " + std::to_string(chunk.size()) + " inputs");
    }
    for (auto& p : part) {
      if (p.num_classes() != h.num_classes()) {
        throw TransportError("predictor returned wrong number of class scores");
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline PredictionVector predict_one(const Predictor& h, const ImageTensor& x) {
  return predict_batch(h, std::span<const ImageTensor>(&x, 1)).front();
}

// Value substituted for dropped pixels: zero, or a fixed tensor (e.g. E[X]).
struct Baseline {
  std::optional<ImageTensor> tensor;

  static Baseline zero() { return {}; }
  static Baseline explicit_tensor(ImageTensor t) { return {std::move(t)}; }
  bool is_zero() const noexcept { return !tensor.has_value(); }
};

// Keeps every channel of a pixel where `keep` is set and substitutes the
// baseline elsewhere.
inline ImageTensor apply_baseline_mask(const ImageTensor& img, const PixelMask& keep,
                                       const Baseline& baseline = Baseline::zero()) {
  if (keep.extent() != img.extent()) {
    throw DataError("apply_baseline_mask: mask " + to_string(keep.extent()) + " vs image " +
                    to_string(img.extent()));
  }
  if (baseline.tensor && !baseline.tensor->same_shape(img)) {
    throw DataError("apply_baseline_mask: baseline shape differs from image");
  }
  const std::size_t n = img.extent().pixels();
  std::vector<float> out(img.values().begin(), img.values().end());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    for (std::size_t p = 0; p < n; ++p) {
      if (keep[p]) continue;
      const std::size_t i = c * n + p;
      out[i] = baseline.tensor ? baseline.tensor->values()[i] : 0.0f;
    }
  }
  return ImageTensor(img.channels(), img.height(), img.width(), std::move(out));
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (auto& v : out) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : out) v /= sum;
  return out;
}

// Softmax over per-class dot products <W_c, x>.
class LinearPredictor final : public Predictor {
 public:
  explicit LinearPredictor(std::vector<ImageTensor> weights) : weights_(std::move(weights)) {
    if (weights_.size() < 2) throw UsageError("linear predictor: need at least two classes");
    for (const auto& w : weights_) {
      if (!w.same_shape(weights_.front())) throw UsageError("linear predictor: weight shapes differ");
    }
  }

  std::size_t num_classes() const override { return weights_.size(); }

  std::vector<PredictionVector> predict(std::span<const ImageTensor> batch) const override {
    std::vector<PredictionVector> out;
    out.reserve(batch.size());
    for (const auto& x : batch) {
      if (!x.same_shape(weights_.front())) throw DataError("linear predictor: input shape mismatch");
      std::vector<double> logits(weights_.size(), 0.0);
      for (std::size_t c = 0; c < weights_.size(); ++c) {
        const auto w = weights_[c].values();
        const auto v = x.values();
        for (std::size_t i = 0; i < v.size(); ++i) logits[c] += double(w[i]) * double(v[i]);
      }
      out.emplace_back(softmax(logits));
    }
    return out;
  }

  const std::vector<ImageTensor>& weights() const noexcept { return weights_; }

 private:
  std::vector<ImageTensor> weights_;
};

// Two-class witness: class 1 iff the mean value inside region R (averaged
// over channels, computed on the possibly masked input) exceeds theta.
// Scores are (theta, mean), so ties resolve to class 0.
//
// With a speckle limit set, class 1 additionally requires that at most that
// fraction of the image's pixels are isolated: every 4-neighbour differs
// from the pixel in whether it was dropped (all channels zero). This models
// a classifier that is thrown off by salt-and-pepper masking artifacts; it
// makes the decision non-monotone in the kept set.
class RegionWitnessPredictor final : public Predictor {
 public:
  RegionWitnessPredictor(PixelMask region, double theta,
                         std::optional<double> speckle_limit = std::nullopt)
      : region_(std::move(region)), theta_(theta), speckle_limit_(speckle_limit) {
    for (std::size_t p = 0; p < region_.size(); ++p) {
      if (region_[p]) members_.push_back(p);
    }
    if (members_.empty()) throw UsageError("region witness: region mask is empty");
  }

  std::size_t num_classes() const override { return 2; }

  std::vector<PredictionVector> predict(std::span<const ImageTensor> batch) const override {
    std::vector<PredictionVector> out;
    out.reserve(batch.size());
    for (const auto& x : batch) out.emplace_back(scores(x));
    return out;
  }

  double region_mean(const ImageTensor& x) const {
    if (x.extent() != region_.extent()) throw DataError("region witness: input extent mismatch");
    double sum = 0.0;
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const auto ch = x.channel(c);
      for (std::size_t p : members_) sum += ch[p];
    }
    return sum / static_cast<double>(members_.size() * x.channels());
  }

  double speckle_fraction(const ImageTensor& x) const {
    const std::size_t h = x.height(), w = x.width(), n = h * w;
    std::vector<bool> dropped(n, true);
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const auto ch = x.channel(c);
      for (std::size_t p = 0; p < n; ++p) {
        if (ch[p] != 0.0f) dropped[p] = false;
      }
    }
    std::size_t isolated = 0;
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t y = p / w, col = p % w;
      std::size_t neighbours = 0, differing = 0;
      auto visit = [&](std::size_t q) {
        ++neighbours;
        differing += dropped[q] != dropped[p] ? 1 : 0;
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (col > 0) visit(p - 1);
      if (col + 1 < w) visit(p + 1);
      if (neighbours > 0 && differing == neighbours) ++isolated;
    }
    return static_cast<double>(isolated) / static_cast<double>(n);
  }

  const PixelMask& region() const noexcept { return region_; }
  double theta() const noexcept { return theta_; }
  std::optional<double> speckle_limit() const noexcept { return speckle_limit_; }

 private:
  std::vector<double> scores(const ImageTensor& x) const {
    const double mean = region_mean(x);
    if (speckle_limit_ && speckle_fraction(x) > *speckle_limit_) {
      return {theta_, std::min(mean, theta_)};
    }
    return {theta_, mean};
  }

  PixelMask region_;
  double theta_;
  std::optional<double> speckle_limit_;
  std::vector<std::size_t> members_;
};

// Builds a synthetic predictor from its JSON description:
//   {"kind":"linear", "weights_path":"w.cfxt"}           dims [K,C,H,W] or [K,H,W]
//   {"kind":"linear", "channels":C, "height":H, "width":W, "weights":[[...], ...]}
//   {"kind":"region_witness", "height":H, "width":W, "theta":0.5,
//    "region":{"rows":[y0,y1], "cols":[x0,x1]} | "pixels":[[y,x], ...],
//    "speckle_limit":0.006}
inline PredictorPtr make_synthetic_predictor(const nlohmann::json& spec,
                                             const std::filesystem::path& base_dir = {}) {
  try {
    const auto kind = spec.at("kind").get<std::string>();
    if (kind == "linear") {
      std::vector<ImageTensor> weights;
      if (spec.contains("weights_path")) {
        std::filesystem::path p = spec.at("weights_path").get<std::string>();
        if (p.is_relative()) p = base_dir / p;
        auto raw = read_tensor(p);
        if (raw.dims.size() != 3 && raw.dims.size() != 4) {
          throw UsageError("linear weights must be [K,C,H,W] or [K,H,W]");
        }
        const std::size_t k = raw.dims[0];
        const std::size_t c = raw.dims.size() == 4 ? raw.dims[1] : 1;
        const std::size_t h = raw.dims[raw.dims.size() - 2], w = raw.dims.back();
        const std::size_t per = c * h * w;
        for (std::size_t i = 0; i < k; ++i) {
          weights.emplace_back(c, h, w,
                               std::vector<float>(raw.data.begin() + i * per,
                                                  raw.data.begin() + (i + 1) * per));
        }
      } else {
        const auto c = spec.at("channels").get<std::size_t>();
        const auto h = spec.at("height").get<std::size_t>();
        const auto w = spec.at("width").get<std::size_t>();
        for (const auto& row : spec.at("weights")) {
          weights.emplace_back(c, h, w, row.get<std::vector<float>>());
        }
      }
      return std::make_shared<LinearPredictor>(std::move(weights));
    }
    if (kind == "region_witness") {
      const Extent e{spec.at("height").get<std::size_t>(), spec.at("width").get<std::size_t>()};
      PixelMask region(e, false);
      const auto& r = spec.at("region");
      if (r.contains("pixels")) {
        for (const auto& yx : r.at("pixels")) {
          const auto y = yx.at(0).get<std::size_t>(), x = yx.at(1).get<std::size_t>();
          if (y >= e.height || x >= e.width) throw UsageError("region pixel out of bounds");
          region.set(y * e.width + x, true);
        }
      } else {
        const auto rows = r.at("rows").get<std::vector<std::size_t>>();
        const auto cols = r.at("cols").get<std::vector<std::size_t>>();
        if (rows.size() != 2 || cols.size() != 2 || rows[1] > e.height || cols[1] > e.width) {
          throw UsageError("region rows/cols must be [begin,end) within the image");
        }
        for (std::size_t y = rows[0]; y < rows[1]; ++y) {
          for (std::size_t x = cols[0]; x < cols[1]; ++x) region.set(y * e.width + x, true);
        }
      }
      std::optional<double> speckle;
      if (spec.contains("speckle_limit")) speckle = spec.at("speckle_limit").get<double>();
      return std::make_shared<RegionWitnessPredictor>(std::move(region),
                                                      spec.at("theta").get<double>(), speckle);
    }
    throw UsageError("unknown synthetic predictor kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("synthetic predictor spec: ") + e.what());
  }
}

}  // namespace cfx
