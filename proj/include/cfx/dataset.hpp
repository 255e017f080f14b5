#pragma once

// In-memory instances loaded from a manifest, and the seeded
// calibration/test split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cfx/conformity.hpp"
#include "cfx/digest.hpp"
#include "cfx/error.hpp"
#include "cfx/manifest.hpp"
#include "cfx/predictor.hpp"
#include "cfx/segmentation.hpp"
#include "cfx/tensor_io.hpp"

namespace cfx {

struct Instance {
  std::string instance_id;
  ImageTensor image;
  AttributionMap attribution;
  std::optional<SegmentationMap> segmentation;
  std::optional<std::size_t> reference_class;

  InstanceView view() const {
    return {instance_id, &image, &attribution, segmentation ? &*segmentation : nullptr,
            reference_class};
  }
};

inline Instance load_instance(const ManifestItem& item) {
  Instance inst;
  inst.instance_id = item.instance_id;
  inst.image = read_image(item.image_path);
  inst.attribution = read_attribution(item.attribution_path);
  if (inst.attribution.extent() != inst.image.extent()) {
    throw DataError("instance '" + item.instance_id + "': attribution " +
                    to_string(inst.attribution.extent()) + " vs image " +
                    to_string(inst.image.extent()) + " dimension mismatch");
  }
  if (item.segmentation_path) {
    inst.segmentation = read_segmentation(*item.segmentation_path);
    if (inst.segmentation->extent() != inst.image.extent()) {
      throw DataError("instance '" + item.instance_id + "': segmentation dimension mismatch");
    }
  }
  inst.reference_class = item.cached_prediction;
  return inst;
}

inline Baseline load_baseline(const DatasetManifest& m) {
  if (m.baseline.kind == BaselinePolicy::Kind::kZero) return Baseline::zero();
  return Baseline::explicit_tensor(read_image(m.baseline.tensor_path));
}

struct DataSplit {
  std::vector<std::size_t> calibration;  // indices into the manifest, ascending
  std::vector<std::size_t> test;
};

// Seeded Fisher-Yates permutation of 0..n-1 (bit-reproducible across
// standard libraries: only the raw mt19937_64 stream is used).
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

inline DataSplit seeded_split(std::size_t n, double calibration_fraction, std::uint64_t seed) {
  if (!(calibration_fraction > 0.0 && calibration_fraction < 1.0)) {
    throw UsageError("calibration fraction must be in (0,1)");
  }
  const auto perm = seeded_permutation(n, seed);
  auto n_cal = static_cast<std::size_t>(std::llround(calibration_fraction * static_cast<double>(n)));
  if (n >= 2) n_cal = std::clamp<std::size_t>(n_cal, 1, n - 1);
  DataSplit split;
  split.calibration.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(std::min(n_cal, n)));
  split.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(std::min(n_cal, n)), perm.end());
  std::sort(split.calibration.begin(), split.calibration.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// Fingerprint of the manifest contents together with the split that was
// drawn from it.
inline std::string manifest_digest(const std::filesystem::path& manifest_path, std::uint64_t seed,
                                   double calibration_fraction) {
  const auto bytes = read_file_bytes(manifest_path);
  std::ostringstream os;
  os.precision(17);
  os << ";seed=" << seed << ";cal=" << calibration_fraction;
  return Fnv1a().update(bytes).update(os.str()).hex();
}

}  // namespace cfx
