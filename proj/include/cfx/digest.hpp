#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace cfx {

// 64-bit FNV-1a, used to fingerprint configurations and input files.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::uint8_t> bytes) {
    for (auto b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  Fnv1a& update(std::string_view s) {
    return update(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }

  std::uint64_t value() const noexcept { return state_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string digest_hex(std::string_view s) { return Fnv1a().update(s).hex(); }

}  // namespace cfx
