#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cfx/error.hpp"

namespace cfx {

namespace detail {

inline void require_finite(std::span<const float> values, const char* what) {
  for (float v : values) {
    if (!std::isfinite(v)) throw DataError(std::string(what) + ": non-finite value");
  }
}

}  // namespace detail

// Spatial extent shared by images, attribution maps, masks and segmentations.
struct Extent {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const noexcept { return height * width; }
  friend bool operator==(const Extent&, const Extent&) = default;
};

inline std::string to_string(const Extent& e) {
  return std::to_string(e.height) + "x" + std::to_string(e.width);
}

// C x H x W image, row-major channel-height-width, already normalized.
class ImageTensor {
 public:
  ImageTensor() = default;

  ImageTensor(std::size_t channels, std::size_t height, std::size_t width,
              std::vector<float> data)
      : channels_(channels), extent_{height, width}, data_(std::move(data)) {
    if (data_.size() != channels * height * width) {
      throw DataError("image tensor: data length " + std::to_string(data_.size()) +
                      " does not match " + std::to_string(channels) + "x" +
                      std::to_string(height) + "x" + std::to_string(width));
    }
    detail::require_finite(data_, "image tensor");
  }

  static ImageTensor zeros(std::size_t channels, std::size_t height, std::size_t width) {
    return ImageTensor(channels, height, width,
                       std::vector<float>(channels * height * width, 0.0f));
  }

  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return extent_.height; }
  std::size_t width() const noexcept { return extent_.width; }
  Extent extent() const noexcept { return extent_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * extent_.height + y) * extent_.width + x];
  }

  std::span<const float> values() const noexcept { return data_; }
  std::span<const float> channel(std::size_t c) const noexcept {
    return std::span<const float>(data_).subspan(c * extent_.pixels(), extent_.pixels());
  }

  bool same_shape(const ImageTensor& o) const noexcept {
    return channels_ == o.channels_ && extent_ == o.extent_;
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t channels_ = 0;
  Extent extent_;
  std::vector<float> data_;
};

// One attribution score per pixel (channel-aggregated).
class AttributionMap {
 public:
  AttributionMap() = default;

  AttributionMap(std::size_t height, std::size_t width, std::vector<float> scores)
      : extent_{height, width}, scores_(std::move(scores)) {
    if (scores_.size() != height * width) {
      throw DataError("attribution map: " + std::to_string(scores_.size()) +
                      " scores for " + std::to_string(height) + "x" +
                      std::to_string(width) + " pixels");
    }
    detail::require_finite(scores_, "attribution map");
  }

  // Sums per-channel attributions into one score per pixel.
  static AttributionMap from_channels(const ImageTensor& per_channel) {
    std::vector<float> out(per_channel.extent().pixels(), 0.0f);
    for (std::size_t c = 0; c < per_channel.channels(); ++c) {
      auto ch = per_channel.channel(c);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += ch[i];
    }
    return AttributionMap(per_channel.height(), per_channel.width(), std::move(out));
  }

  std::size_t height() const noexcept { return extent_.height; }
  std::size_t width() const noexcept { return extent_.width; }
  Extent extent() const noexcept { return extent_; }
  std::size_t size() const noexcept { return scores_.size(); }
  bool empty() const noexcept { return scores_.empty(); }
  std::span<const float> scores() const noexcept { return scores_; }
  float operator[](std::size_t i) const { return scores_[i]; }

  friend bool operator==(const AttributionMap&, const AttributionMap&) = default;

 private:
  Extent extent_;
  std::vector<float> scores_;
};

// Boolean keep-mask over pixels; true = feature retained.
class PixelMask {
 public:
  PixelMask() = default;
  PixelMask(Extent extent, bool value)
      : extent_(extent), keep_(extent.pixels(), value ? 1 : 0) {}
  PixelMask(Extent extent, std::vector<std::uint8_t> keep)
      : extent_(extent), keep_(std::move(keep)) {
    if (keep_.size() != extent_.pixels()) throw DataError("pixel mask: size mismatch");
    for (auto& k : keep_) k = k ? 1 : 0;
  }

  Extent extent() const noexcept { return extent_; }
  std::size_t size() const noexcept { return keep_.size(); }
  bool operator[](std::size_t i) const { return keep_[i] != 0; }
  void set(std::size_t i, bool v) { keep_[i] = v ? 1 : 0; }
  std::span<const std::uint8_t> bits() const noexcept { return keep_; }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(keep_.begin(), keep_.end(), 1));
  }

  double fraction() const noexcept {
    return keep_.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(keep_.size());
  }

  // Every retained pixel of *this is also retained in `other`.
  bool subset_of(const PixelMask& other) const {
    if (other.extent_ != extent_) return false;
    for (std::size_t i = 0; i < keep_.size(); ++i) {
      if (keep_[i] && !other.keep_[i]) return false;
    }
    return true;
  }

  friend bool operator==(const PixelMask&, const PixelMask&) = default;

 private:
  Extent extent_;
  std::vector<std::uint8_t> keep_;
};

// Lowest index attaining the maximum.
inline std::size_t argmax(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

struct PredictionVector {
  std::vector<double> class_scores;
  std::size_t predicted_class = 0;

  PredictionVector() = default;
  explicit PredictionVector(std::vector<double> scores)
      : class_scores(std::move(scores)), predicted_class(argmax(class_scores)) {
    if (class_scores.empty()) throw DataError("prediction vector: no classes");
  }

  std::size_t num_classes() const noexcept { return class_scores.size(); }
  friend bool operator==(const PredictionVector&, const PredictionVector&) = default;
};

}  // namespace cfx
