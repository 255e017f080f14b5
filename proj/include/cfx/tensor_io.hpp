#pragma once

// CFXT binary tensor files.
//
//   bytes 0-3   magic "CFXT"
//   byte  4     format version (1)
//   byte  5     dtype code (1 = float32)
//   byte  6     number of dimensions
//   bytes 7..   dims, u32 little-endian each
//   then        payload, float32 little-endian, row-major

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cfx/error.hpp"
#include "cfx/tensor.hpp"

namespace cfx {

inline constexpr std::array<char, 4> kTensorMagic = {'C', 'F', 'X', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

// Shape-agnostic view of a CFXT file's contents.
struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t d) { return a * d; });
  }
  friend bool operator==(const RawTensor&, const RawTensor&) = default;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const RawTensor& t) {
  if (t.dims.size() > 255) throw UsageError("tensor: too many dimensions");
  if (t.element_count() != t.data.size()) {
    throw DataError("tensor: data length does not match dims");
  }
  detail::require_finite(t.data, "tensor");
  std::vector<std::uint8_t> out;
  out.reserve(7 + 4 * t.dims.size() + 4 * t.data.size());
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(kTensorVersion);
  out.push_back(kDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(out, d);
  for (float v : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline RawTensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw ParseError("truncated header", bytes.size());
  if (std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0) throw ParseError("bad magic", 0);
  if (bytes.size() < 7) throw ParseError("truncated header", bytes.size());
  if (bytes[4] != kTensorVersion) {
    throw ParseError("unsupported version " + std::to_string(bytes[4]), 4);
  }
  if (bytes[5] != kDtypeF32) throw ParseError("unsupported dtype " + std::to_string(bytes[5]), 5);
  const std::size_t ndims = bytes[6];
  const std::size_t header = 7 + 4 * ndims;
  if (bytes.size() < header) throw ParseError("truncated dimension list", bytes.size());

  RawTensor t;
  t.dims.resize(ndims);
  for (std::size_t i = 0; i < ndims; ++i) t.dims[i] = detail::get_u32(bytes.data() + 7 + 4 * i);

  const std::size_t count = t.element_count();
  const std::size_t payload = bytes.size() - header;
  if (payload < 4 * count) throw ParseError("payload shorter than dims imply", bytes.size());
  if (payload > 4 * count) throw ParseError("payload longer than dims imply", header + 4 * count);

  t.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t off = header + 4 * i;
    t.data[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + off));
    if (!std::isfinite(t.data[i])) throw ParseError("non-finite value", off);
  }
  return t;
}

inline void write_tensor(const RawTensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

inline void write_tensor(const ImageTensor& t, const std::filesystem::path& path) {
  RawTensor raw{{static_cast<std::uint32_t>(t.channels()), static_cast<std::uint32_t>(t.height()),
                 static_cast<std::uint32_t>(t.width())},
                {t.values().begin(), t.values().end()}};
  write_tensor(raw, path);
}

inline void write_tensor(const AttributionMap& t, const std::filesystem::path& path) {
  RawTensor raw{{static_cast<std::uint32_t>(t.height()), static_cast<std::uint32_t>(t.width())},
                {t.scores().begin(), t.scores().end()}};
  write_tensor(raw, path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline RawTensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_tensor(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.reason(), e.offset());
  }
}

// Accepts [C,H,W] or [H,W] (treated as one channel).
inline ImageTensor to_image(RawTensor raw) {
  if (raw.dims.size() == 2) {
    return ImageTensor(1, raw.dims[0], raw.dims[1], std::move(raw.data));
  }
  if (raw.dims.size() == 3) {
    return ImageTensor(raw.dims[0], raw.dims[1], raw.dims[2], std::move(raw.data));
  }
  throw DataError("image tensor must have 2 or 3 dims, got " + std::to_string(raw.dims.size()));
}

// Accepts [H,W] or [1,H,W].
inline AttributionMap to_attribution(RawTensor raw) {
  if (raw.dims.size() == 2) return AttributionMap(raw.dims[0], raw.dims[1], std::move(raw.data));
  if (raw.dims.size() == 3 && raw.dims[0] == 1) {
    return AttributionMap(raw.dims[1], raw.dims[2], std::move(raw.data));
  }
  throw DataError("attribution tensor must be HxW");
}

inline ImageTensor read_image(const std::filesystem::path& path) {
  return to_image(read_tensor(path));
}

inline AttributionMap read_attribution(const std::filesystem::path& path) {
  return to_attribution(read_tensor(path));
}

}  // namespace cfx
