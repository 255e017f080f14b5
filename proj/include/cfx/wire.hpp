#pragma once

// Framing for the predictor stdio protocol.
//
// Every message is [u32 LE header_len][JSON header][raw f32 LE payload].
//   engine -> server  {"op":"hello","version":1}
//   server -> engine  {"op":"hello","version":1,"num_classes":k}
//   engine -> server  {"op":"predict","n":N,"c":C,"h":H,"w":W}   + N*C*H*W floats
//   server -> engine  {"op":"scores","n":N,"k":k}                + N*k floats
//   server -> engine  {"op":"error","msg":"..."}                 (no payload)

#include <bit>
#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "cfx/error.hpp"

namespace cfx::wire {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxHeaderBytes = 1u << 20;

struct Frame {
  nlohmann::ordered_json header;
  std::vector<float> payload;
};

// Payload length in floats implied by a header; throws on inconsistent headers.
inline std::size_t payload_floats(const nlohmann::ordered_json& header) {
  if (!header.is_object() || !header.contains("op") || !header.at("op").is_string()) {
    throw TransportError("frame header lacks an \"op\" string");
  }
  const auto op = header.at("op").get<std::string>();
  auto dim = [&](const char* key) {
    if (!header.contains(key) || !header.at(key).is_number_unsigned()) {
      throw TransportError("frame header \"" + op + "\" lacks unsigned field \"" + key + "\"");
    }
    return header.at(key).get<std::size_t>();
  };
  if (op == "predict") return dim("n") * dim("c") * dim("h") * dim("w");
  if (op == "scores") return dim("n") * dim("k");
  return 0;
}

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  const std::string header = f.header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(4 + header.size() + 4 * f.payload.size());
  const auto len = static_cast<std::uint32_t>(header.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  for (float v : f.payload) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

inline Frame hello_request() { return {{{"op", "hello"}, {"version", kProtocolVersion}}, {}}; }

inline Frame hello_reply(std::size_t num_classes) {
  return {{{"op", "hello"}, {"version", kProtocolVersion}, {"num_classes", num_classes}}, {}};
}

inline Frame error_frame(const std::string& msg) { return {{{"op", "error"}, {"msg", msg}}, {}}; }

// Blocking byte source over a file descriptor. Returns false on clean EOF at
// a frame boundary; throws on EOF mid-frame or read errors.
class FdReader {
 public:
  explicit FdReader(int fd) : fd_(fd) {}

  bool read_exact(std::uint8_t* dst, std::size_t n, bool eof_ok) {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::read(fd_, dst + got, n - got);
      if (r < 0) {
        if (errno == EINTR) continue;
        throw TransportError("read failed: errno " + std::to_string(errno));
      }
      if (r == 0) {
        if (got == 0 && eof_ok) return false;
        throw TransportError("unexpected end of stream after " + std::to_string(got) + " of " +
                             std::to_string(n) + " bytes");
      }
      got += static_cast<std::size_t>(r);
    }
    return true;
  }

 private:
  int fd_;
};

class FdWriter {
 public:
  explicit FdWriter(int fd) : fd_(fd) {}

  void write_all(std::span<const std::uint8_t> bytes) {
    std::size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t r = ::write(fd_, bytes.data() + done, bytes.size() - done);
      if (r < 0) {
        if (errno == EINTR) continue;
        throw TransportError("write failed: errno " + std::to_string(errno));
      }
      done += static_cast<std::size_t>(r);
    }
  }

 private:
  int fd_;
};

// Reads the raw header bytes of one frame. std::nullopt on clean EOF.
inline std::optional<std::string> read_header_bytes(FdReader& in) {
  std::uint8_t len_bytes[4];
  if (!in.read_exact(len_bytes, 4, true)) return std::nullopt;
  const std::uint32_t len = std::uint32_t{len_bytes[0]} | (std::uint32_t{len_bytes[1]} << 8) |
                            (std::uint32_t{len_bytes[2]} << 16) |
                            (std::uint32_t{len_bytes[3]} << 24);
  if (len > kMaxHeaderBytes) throw TransportError("frame header too large");
  std::string header(len, '\0');
  if (len > 0) in.read_exact(reinterpret_cast<std::uint8_t*>(header.data()), len, false);
  return header;
}

inline std::vector<float> read_payload(FdReader& in, std::size_t floats) {
  std::vector<std::uint8_t> bytes(4 * floats);
  if (!bytes.empty()) in.read_exact(bytes.data(), bytes.size(), false);
  std::vector<float> out(floats);
  for (std::size_t i = 0; i < floats; ++i) {
    const std::uint8_t* p = bytes.data() + 4 * i;
    out[i] = std::bit_cast<float>(std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                                  (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24));
  }
  return out;
}

// Reads one complete frame. std::nullopt on clean EOF before the frame.
inline std::optional<Frame> read_frame(FdReader& in) {
  auto header_bytes = read_header_bytes(in);
  if (!header_bytes) return std::nullopt;
  Frame f;
  try {
    f.header = nlohmann::ordered_json::parse(*header_bytes);
  } catch (const nlohmann::json::exception&) {
    throw TransportError("frame header is not valid JSON: '" + header_bytes->substr(0, 80) + "'");
  }
  f.payload = read_payload(in, payload_floats(f.header));
  return f;
}

inline void write_frame(FdWriter& out, const Frame& f) { out.write_all(encode_frame(f)); }

// Splits an in-memory byte stream (e.g. a recorded transcript) into frames.
inline std::vector<Frame> decode_frames(std::span<const std::uint8_t> bytes) {
  std::vector<Frame> frames;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    if (bytes.size() - pos < 4) throw TransportError("truncated frame length");
    const std::uint32_t len = std::uint32_t{bytes[pos]} | (std::uint32_t{bytes[pos + 1]} << 8) |
                              (std::uint32_t{bytes[pos + 2]} << 16) |
                              (std::uint32_t{bytes[pos + 3]} << 24);
    pos += 4;
    if (bytes.size() - pos < len) throw TransportError("truncated frame header");
    Frame f;
    f.header = nlohmann::ordered_json::parse(bytes.begin() + pos, bytes.begin() + pos + len);
    pos += len;
    const std::size_t n = payload_floats(f.header);
    if (bytes.size() - pos < 4 * n) throw TransportError("truncated frame payload");
    f.payload.resize(n);
    for (std::size_t i = 0; i < n; ++i, pos += 4) {
      f.payload[i] = std::bit_cast<float>(
          std::uint32_t{bytes[pos]} | (std::uint32_t{bytes[pos + 1]} << 8) |
          (std::uint32_t{bytes[pos + 2]} << 16) | (std::uint32_t{bytes[pos + 3]} << 24));
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace cfx::wire
