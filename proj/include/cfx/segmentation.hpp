#pragma once

// SLIC super-pixels: k-means in a joint color + position space restricted to
// a local window around each center, followed by a connectivity pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/digest.hpp"
#include "cfx/error.hpp"
#include "cfx/tensor.hpp"
#include "cfx/tensor_io.hpp"

namespace cfx {

class SegmentationMap {
 public:
  SegmentationMap() = default;

  SegmentationMap(Extent extent, std::vector<std::uint32_t> labels, std::size_t num_segments)
      : extent_(extent), labels_(std::move(labels)), num_segments_(num_segments) {
    if (labels_.size() != extent_.pixels()) throw DataError("segmentation: label count mismatch");
    if (num_segments_ == 0 && !labels_.empty()) throw DataError("segmentation: zero segments");
    sizes_.assign(num_segments_, 0);
    for (auto l : labels_) {
      if (l >= num_segments_) throw DataError("segmentation: label out of range");
      ++sizes_[l];
    }
    for (std::size_t s = 0; s < num_segments_; ++s) {
      if (sizes_[s] == 0) throw DataError("segmentation: segment " + std::to_string(s) + " is empty");
    }
  }

  Extent extent() const noexcept { return extent_; }
  std::size_t num_segments() const noexcept { return num_segments_; }
  std::uint32_t operator[](std::size_t pixel) const { return labels_[pixel]; }
  std::span<const std::uint32_t> labels() const noexcept { return labels_; }
  std::size_t segment_size(std::size_t s) const { return sizes_[s]; }

  friend bool operator==(const SegmentationMap& a, const SegmentationMap& b) {
    return a.extent_ == b.extent_ && a.num_segments_ == b.num_segments_ && a.labels_ == b.labels_;
  }

 private:
  Extent extent_;
  std::vector<std::uint32_t> labels_;
  std::size_t num_segments_ = 0;
  std::vector<std::size_t> sizes_;
};

struct SlicParams {
  std::size_t target_segments = 100;
  double compactness = 10.0;
  std::size_t max_iters = 10;
  double min_size_factor = 0.25;
  bool perturb_seeds = true;

  void validate() const {
    if (target_segments < 1) throw UsageError("slic: target_segments must be >= 1");
    if (!(compactness > 0.0)) throw UsageError("slic: compactness must be > 0");
    if (max_iters < 1) throw UsageError("slic: max_iters must be >= 1");
    if (!(min_size_factor > 0.0 && min_size_factor < 1.0)) {
      throw UsageError("slic: min_size_factor must be in (0,1)");
    }
  }

  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "slic;k=" << target_segments << ";m=" << compactness << ";iters=" << max_iters
       << ";minf=" << min_size_factor << ";perturb=" << (perturb_seeds ? 1 : 0);
    return os.str();
  }

  std::string digest() const { return digest_hex(canonical()); }
};

namespace detail {

// sRGB in [0,1] to CIELAB (D65).
inline void srgb_to_lab(double r, double g, double b, double out[3]) {
  auto lin = [](double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  r = lin(r);
  g = lin(g);
  b = lin(b);
  const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
  const double y = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b) / 1.00000;
  const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
  auto f = [](double t) {
    constexpr double kEps = 216.0 / 24389.0;
    constexpr double kKappa = 24389.0 / 27.0;
    return t > kEps ? std::cbrt(t) : (kKappa * t + 16.0) / 116.0;
  };
  const double fx = f(x), fy = f(y), fz = f(z);
  out[0] = 116.0 * fy - 16.0;
  out[1] = 500.0 * (fx - fy);
  out[2] = 200.0 * (fy - fz);
}

// Per-pixel color features, pixel-major. Values are min-max rescaled over the
// whole image first (inputs are mean/std normalized, not [0,1]). Three
// channels go through CIELAB; any other channel count uses the rescaled
// values on the 0..100 scale of L.
inline std::vector<double> color_features(const ImageTensor& img, std::size_t& dims) {
  const auto vals = img.values();
  const auto [lo_it, hi_it] = std::minmax_element(vals.begin(), vals.end());
  const double lo = *lo_it, range = static_cast<double>(*hi_it) - lo;
  auto unit = [&](float v) { return range > 0.0 ? (v - lo) / range : 0.0; };

  const std::size_t n = img.extent().pixels();
  if (img.channels() == 3) {
    dims = 3;
    std::vector<double> out(3 * n);
    auto r = img.channel(0), g = img.channel(1), b = img.channel(2);
    for (std::size_t p = 0; p < n; ++p) srgb_to_lab(unit(r[p]), unit(g[p]), unit(b[p]), &out[3 * p]);
    return out;
  }
  dims = img.channels();
  std::vector<double> out(dims * n);
  for (std::size_t c = 0; c < dims; ++c) {
    auto ch = img.channel(c);
    for (std::size_t p = 0; p < n; ++p) out[dims * p + c] = 100.0 * unit(ch[p]);
  }
  return out;
}

struct SlicCenter {
  std::vector<double> color;
  double y = 0.0;
  double x = 0.0;
};

}  // namespace detail

// Splits every label into 4-connected components, then merges components
// smaller than `min_size` (and, if `max_segments` > 0, the smallest remaining
// components until at most `max_segments` are left) into their largest
// 4-adjacent neighbor. Output labels are dense, numbered in raster order of
// each segment's first pixel.
inline SegmentationMap enforce_connectivity(Extent extent, std::span<const std::uint32_t> raw,
                                            std::size_t min_size, std::size_t max_segments = 0) {
  const std::size_t h = extent.height, w = extent.width, n = extent.pixels();
  if (raw.size() != n) throw DataError("enforce_connectivity: label count mismatch");
  if (n == 0) return SegmentationMap(extent, {}, 0);

  constexpr std::uint32_t kUnset = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> comp(n, kUnset);
  std::vector<std::vector<std::size_t>> members;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] != kUnset) continue;
    const auto id = static_cast<std::uint32_t>(members.size());
    members.emplace_back();
    comp[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      members[id].push_back(p);
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (comp[q] == kUnset && raw[q] == raw[p]) {
          comp[q] = id;
          stack.push_back(q);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
  }

  std::size_t alive = members.size();
  std::vector<bool> dead(members.size(), false), isolated(members.size(), false);
  using Entry = std::pair<std::size_t, std::uint32_t>;  // (size, id), min-heap
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  for (std::uint32_t id = 0; id < members.size(); ++id) heap.emplace(members[id].size(), id);

  while (!heap.empty()) {
    const auto [size, id] = heap.top();
    if (dead[id] || isolated[id] || members[id].size() != size) {
      heap.pop();
      continue;
    }
    const bool too_small = size < min_size;
    const bool too_many = max_segments > 0 && alive > max_segments;
    if (!too_small && !too_many) break;
    heap.pop();

    std::uint32_t target = kUnset;
    for (std::size_t p : members[id]) {
      const std::size_t y = p / w, x = p % w;
      auto consider = [&](std::size_t q) {
        const auto c = comp[q];
        if (c == id) return;
        if (target == kUnset || members[c].size() > members[target].size() ||
            (members[c].size() == members[target].size() && c < target)) {
          target = c;
        }
      };
      if (y > 0) consider(p - w);
      if (y + 1 < h) consider(p + w);
      if (x > 0) consider(p - 1);
      if (x + 1 < w) consider(p + 1);
    }
    if (target == kUnset) {
      isolated[id] = true;
      continue;
    }
    for (std::size_t p : members[id]) comp[p] = target;
    members[target].insert(members[target].end(), members[id].begin(), members[id].end());
    members[id].clear();
    dead[id] = true;
    --alive;
    heap.emplace(members[target].size(), target);
  }

  std::vector<std::uint32_t> dense(members.size(), kUnset);
  std::uint32_t next = 0;
  std::vector<std::uint32_t> labels(n);
  for (std::size_t p = 0; p < n; ++p) {
    auto& d = dense[comp[p]];
    if (d == kUnset) d = next++;
    labels[p] = d;
  }
  return SegmentationMap(extent, std::move(labels), next);
}

struct SlicResult {
  SegmentationMap segmentation;
  std::vector<std::uint32_t> raw_labels;  // assignment before connectivity enforcement
  std::vector<double> energy;             // sum of squared combined distances, per iteration
  std::size_t iterations = 0;
};

// Full SLIC run exposing the intermediate state used by the tests.
inline SlicResult slic_segment_detailed(const ImageTensor& img, const SlicParams& params) {
  params.validate();
  if (img.empty()) throw DataError("slic: empty image");
  const std::size_t h = img.height(), w = img.width(), n = img.extent().pixels();

  std::size_t cdims = 0;
  const auto color = detail::color_features(img, cdims);
  const double k = static_cast<double>(params.target_segments);
  const double step = std::sqrt(static_cast<double>(n) / k);
  const double spatial_weight = (params.compactness / step) * (params.compactness / step);

  const auto ny = static_cast<std::size_t>(std::clamp<double>(
      std::round(std::sqrt(k * static_cast<double>(h) / static_cast<double>(w))), 1.0,
      static_cast<double>(h)));
  const auto nx = static_cast<std::size_t>(std::clamp<double>(
      std::round(k / static_cast<double>(ny)), 1.0, static_cast<double>(w)));
  const double step_y = static_cast<double>(h) / static_cast<double>(ny);
  const double step_x = static_cast<double>(w) / static_cast<double>(nx);

  auto pixel_color = [&](std::size_t p) { return &color[cdims * p]; };
  auto color_dist2 = [&](const double* a, const double* b) {
    double s = 0.0;
    for (std::size_t c = 0; c < cdims; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return s;
  };
  auto gradient = [&](std::size_t y, std::size_t x) {
    const std::size_t ym = y > 0 ? y - 1 : y, yp = y + 1 < h ? y + 1 : y;
    const std::size_t xm = x > 0 ? x - 1 : x, xp = x + 1 < w ? x + 1 : x;
    return color_dist2(pixel_color(y * w + xp), pixel_color(y * w + xm)) +
           color_dist2(pixel_color(yp * w + x), pixel_color(ym * w + x));
  };

  std::vector<detail::SlicCenter> centers;
  centers.reserve(ny * nx);
  for (std::size_t gy = 0; gy < ny; ++gy) {
    for (std::size_t gx = 0; gx < nx; ++gx) {
      detail::SlicCenter c;
      c.y = (static_cast<double>(gy) + 0.5) * step_y - 0.5;
      c.x = (static_cast<double>(gx) + 0.5) * step_x - 0.5;
      auto py = static_cast<std::size_t>(std::clamp(std::floor(c.y + 0.5), 0.0, double(h - 1)));
      auto px = static_cast<std::size_t>(std::clamp(std::floor(c.x + 0.5), 0.0, double(w - 1)));
      if (params.perturb_seeds) {
        double best = gradient(py, px);
        std::size_t by = py, bx = px;
        for (std::size_t yy = py > 0 ? py - 1 : 0; yy <= std::min(py + 1, h - 1); ++yy) {
          for (std::size_t xx = px > 0 ? px - 1 : 0; xx <= std::min(px + 1, w - 1); ++xx) {
            const double g = gradient(yy, xx);
            if (g < best) {
              best = g;
              by = yy;
              bx = xx;
            }
          }
        }
        if (by != py || bx != px) {
          py = by;
          px = bx;
          c.y = static_cast<double>(py);
          c.x = static_cast<double>(px);
        }
      }
      const double* pc = pixel_color(py * w + px);
      c.color.assign(pc, pc + cdims);
      centers.push_back(std::move(c));
    }
  }

  auto dist2 = [&](std::size_t p, const detail::SlicCenter& c) {
    const double dy = static_cast<double>(p / w) - c.y;
    const double dx = static_cast<double>(p % w) - c.x;
    return color_dist2(pixel_color(p), c.color.data()) + spatial_weight * (dy * dy + dx * dx);
  };

  constexpr std::uint32_t kUnset = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> labels(n, kUnset), previous;
  std::vector<double> best(n);
  const auto radius = static_cast<long>(std::ceil(std::max(step_y, step_x))) + 1;

  SlicResult result;
  for (std::size_t iter = 0; iter < params.max_iters; ++iter) {
    previous = labels;
    for (std::size_t p = 0; p < n; ++p) {
      best[p] = labels[p] == kUnset ? std::numeric_limits<double>::infinity()
                                    : dist2(p, centers[labels[p]]);
    }
    for (std::uint32_t ci = 0; ci < centers.size(); ++ci) {
      const auto& c = centers[ci];
      const long cy = std::lround(c.y), cx = std::lround(c.x);
      const long y0 = std::max(0L, cy - radius), y1 = std::min<long>(long(h) - 1, cy + radius);
      const long x0 = std::max(0L, cx - radius), x1 = std::min<long>(long(w) - 1, cx + radius);
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          const double d = dist2(p, c);
          if (d < best[p] || (d == best[p] && ci < labels[p])) {
            best[p] = d;
            labels[p] = ci;
          }
        }
      }
    }
    for (std::size_t p = 0; p < n; ++p) {
      if (labels[p] != kUnset) continue;
      for (std::uint32_t ci = 0; ci < centers.size(); ++ci) {
        const double d = dist2(p, centers[ci]);
        if (d < best[p]) {
          best[p] = d;
          labels[p] = ci;
        }
      }
    }

    std::vector<double> sum_color(centers.size() * cdims, 0.0), sum_y(centers.size(), 0.0),
        sum_x(centers.size(), 0.0);
    std::vector<std::size_t> count(centers.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      const auto l = labels[p];
      ++count[l];
      sum_y[l] += static_cast<double>(p / w);
      sum_x[l] += static_cast<double>(p % w);
      for (std::size_t c = 0; c < cdims; ++c) sum_color[l * cdims + c] += pixel_color(p)[c];
    }
    for (std::size_t ci = 0; ci < centers.size(); ++ci) {
      if (count[ci] == 0) continue;
      const double inv = 1.0 / static_cast<double>(count[ci]);
      centers[ci].y = sum_y[ci] * inv;
      centers[ci].x = sum_x[ci] * inv;
      for (std::size_t c = 0; c < cdims; ++c) centers[ci].color[c] = sum_color[ci * cdims + c] * inv;
    }

    double energy = 0.0;
    for (std::size_t p = 0; p < n; ++p) energy += dist2(p, centers[labels[p]]);
    result.energy.push_back(energy);
    result.iterations = iter + 1;
    if (labels == previous) break;
  }

  const auto min_size = std::max<std::size_t>(
      1, static_cast<std::size_t>(params.min_size_factor * static_cast<double>(n) / k));
  result.raw_labels = labels;
  result.segmentation =
      enforce_connectivity(img.extent(), labels, min_size, 2 * params.target_segments);
  return result;
}

inline SegmentationMap slic_segment(const ImageTensor& img, const SlicParams& params) {
  return slic_segment_detailed(img, params).segmentation;
}

// True when every segment's pixel set is 4-connected (flood fill check).
inline bool is_four_connected(const SegmentationMap& seg) {
  const std::size_t h = seg.extent().height, w = seg.extent().width, n = seg.extent().pixels();
  std::vector<bool> seen_label(seg.num_segments(), false), visited(n, false);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (visited[start]) continue;
    const auto l = seg[start];
    if (seen_label[l]) return false;  // second component with the same label
    seen_label[l] = true;
    stack.assign(1, start);
    visited[start] = true;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (!visited[q] && seg[q] == l) {
          visited[q] = true;
          stack.push_back(q);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
  }
  return true;
}

// Labels persist as an HxW CFXT tensor of float labels; `num_segments` and
// the SLIC digest go into a JSON sidecar next to it (same stem, .json).
inline std::filesystem::path segmentation_sidecar(const std::filesystem::path& tensor_path) {
  auto p = tensor_path;
  return p.replace_extension(".json");
}

inline void write_segmentation(const SegmentationMap& seg, const std::filesystem::path& path,
                               const std::string& slic_digest = {}) {
  RawTensor raw{{static_cast<std::uint32_t>(seg.extent().height),
                 static_cast<std::uint32_t>(seg.extent().width)},
                {}};
  raw.data.reserve(seg.labels().size());
  for (auto l : seg.labels()) raw.data.push_back(static_cast<float>(l));
  write_tensor(raw, path);
  nlohmann::json side{{"num_segments", seg.num_segments()}};
  if (!slic_digest.empty()) side["slic_digest"] = slic_digest;
  std::ofstream out(segmentation_sidecar(path), std::ios::trunc);
  if (!out) throw DataError("cannot write segmentation sidecar for " + path.string());
  out << side.dump() << '\n';
}

inline SegmentationMap read_segmentation(const std::filesystem::path& path) {
  const auto raw = read_tensor(path);
  if (raw.dims.size() != 2) throw DataError(path.string() + ": segmentation must be HxW");
  std::vector<std::uint32_t> labels;
  labels.reserve(raw.data.size());
  std::uint32_t max_label = 0;
  for (float v : raw.data) {
    if (v < 0.0f || v != std::floor(v) || v > 16777216.0f) {
      throw DataError(path.string() + ": segmentation labels must be non-negative integers");
    }
    labels.push_back(static_cast<std::uint32_t>(v));
    max_label = std::max(max_label, labels.back());
  }
  std::size_t num_segments = labels.empty() ? 0 : std::size_t{max_label} + 1;
  const auto side = segmentation_sidecar(path);
  if (std::filesystem::exists(side)) {
    std::ifstream in(side);
    try {
      num_segments = nlohmann::json::parse(in).at("num_segments").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(side.string() + ": " + e.what());
    }
  }
  return SegmentationMap(Extent{raw.dims[0], raw.dims[1]}, std::move(labels), num_segments);
}

}  // namespace cfx
