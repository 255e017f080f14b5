#pragma once

// Dataset manifests: a JSON file listing instances (image + attribution
// tensors, optional segmentation and cached prediction) plus the baseline
// policy used when masking.
//
// {
//   "num_classes": 10,
//   "baseline_policy": "zero" | {"explicit_tensor": "baseline.cfxt"},
//   "items": [
//     {"instance_id": "a", "image_path": "a.cfxt", "attribution_path": "a_phi.cfxt",
//      "segmentation_path": "a_seg.cfxt", "cached_prediction": 3}
//   ]
// }
//
// Relative paths are resolved against the manifest's directory.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/error.hpp"

namespace cfx {

struct BaselinePolicy {
  enum class Kind { kZero, kExplicitTensor };
  Kind kind = Kind::kZero;
  std::filesystem::path tensor_path;  // only for kExplicitTensor

  friend bool operator==(const BaselinePolicy&, const BaselinePolicy&) = default;
};

struct ManifestItem {
  std::string instance_id;
  std::filesystem::path image_path;
  std::filesystem::path attribution_path;
  std::optional<std::filesystem::path> segmentation_path;
  std::optional<std::size_t> cached_prediction;

  friend bool operator==(const ManifestItem&, const ManifestItem&) = default;
};

struct DatasetManifest {
  std::size_t num_classes = 0;
  BaselinePolicy baseline;
  std::vector<ManifestItem> items;  // file order
};

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& obj, const char* key,
                                           const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw DataError(where + ": missing field '" + key + "'");
  }
  return obj.at(key);
}

inline std::filesystem::path resolve_path(const std::filesystem::path& base,
                                          const std::string& p, bool check_exists) {
  std::filesystem::path full = std::filesystem::path(p);
  if (!full.is_absolute()) full = base / full;
  if (check_exists && !std::filesystem::exists(full)) {
    throw DataError("dangling path: " + full.string());
  }
  return full;
}

}  // namespace detail

inline DatasetManifest parse_manifest(const nlohmann::json& doc,
                                      const std::filesystem::path& base_dir,
                                      bool check_paths = true) {
  DatasetManifest m;
  try {
    const auto& nc = detail::require_field(doc, "num_classes", "manifest");
    if (!nc.is_number_unsigned() || nc.get<std::size_t>() == 0) {
      throw DataError("manifest: num_classes must be a positive integer");
    }
    m.num_classes = nc.get<std::size_t>();

    const auto& bp = detail::require_field(doc, "baseline_policy", "manifest");
    if (bp.is_string() && bp.get<std::string>() == "zero") {
      m.baseline.kind = BaselinePolicy::Kind::kZero;
    } else if (bp.is_object() && bp.contains("explicit_tensor")) {
      m.baseline.kind = BaselinePolicy::Kind::kExplicitTensor;
      m.baseline.tensor_path = detail::resolve_path(
          base_dir, bp.at("explicit_tensor").get<std::string>(), check_paths);
    } else {
      throw DataError("manifest: baseline_policy must be \"zero\" or {\"explicit_tensor\": path}");
    }

    const auto& items = detail::require_field(doc, "items", "manifest");
    if (!items.is_array()) throw DataError("manifest: items must be an array");
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      const std::string where = "manifest item " + std::to_string(i);
      ManifestItem item;
      item.instance_id = detail::require_field(it, "instance_id", where).get<std::string>();
      if (!seen.insert(item.instance_id).second) {
        throw DataError("manifest: duplicate instance_id '" + item.instance_id + "'");
      }
      item.image_path = detail::resolve_path(
          base_dir, detail::require_field(it, "image_path", where).get<std::string>(),
          check_paths);
      item.attribution_path = detail::resolve_path(
          base_dir, detail::require_field(it, "attribution_path", where).get<std::string>(),
          check_paths);
      if (it.contains("segmentation_path") && !it.at("segmentation_path").is_null()) {
        item.segmentation_path = detail::resolve_path(
            base_dir, it.at("segmentation_path").get<std::string>(), check_paths);
      }
      if (it.contains("cached_prediction") && !it.at("cached_prediction").is_null()) {
        const auto cls = it.at("cached_prediction").get<std::size_t>();
        if (cls >= m.num_classes) {
          throw DataError(where + ": cached_prediction out of range");
        }
        item.cached_prediction = cls;
      }
      m.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  return parse_manifest(doc, path.parent_path());
}

// Paths are written relative to `base_dir` when they live beneath it.
inline nlohmann::json manifest_to_json(const DatasetManifest& m,
                                       const std::filesystem::path& base_dir) {
  auto rel = [&](const std::filesystem::path& p) {
    auto r = p.lexically_relative(base_dir);
    return (r.empty() || *r.begin() == "..") ? p.string() : r.string();
  };
  nlohmann::json doc;
  doc["num_classes"] = m.num_classes;
  if (m.baseline.kind == BaselinePolicy::Kind::kZero) {
    doc["baseline_policy"] = "zero";
  } else {
    doc["baseline_policy"] = {{"explicit_tensor", rel(m.baseline.tensor_path)}};
  }
  doc["items"] = nlohmann::json::array();
  for (const auto& it : m.items) {
    nlohmann::json j{{"instance_id", it.instance_id},
                     {"image_path", rel(it.image_path)},
                     {"attribution_path", rel(it.attribution_path)}};
    if (it.segmentation_path) j["segmentation_path"] = rel(*it.segmentation_path);
    if (it.cached_prediction) j["cached_prediction"] = *it.cached_prediction;
    doc["items"].push_back(std::move(j));
  }
  return doc;
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << manifest_to_json(m, path.parent_path()).dump(2) << '\n';
}

}  // namespace cfx
