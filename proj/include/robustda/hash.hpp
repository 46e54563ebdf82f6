#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace robustda {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

// FNV-1a, 64 bit. Used for id hashes, checksums and seed derivation.
class Fnv1a {
public:
  void update(std::span<const std::uint8_t> bytes) {
    for (auto b : bytes) {
      state_ ^= b;
      state_ *= kFnvPrime;
    }
  }
  void update(std::string_view s) {
    update(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }
  void update_u64(std::uint64_t v) {
    std::uint8_t buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::uint8_t>(v >> (8 * i));
    update(std::span<const std::uint8_t>(buf, 8));
  }
  std::uint64_t digest() const { return state_; }

private:
  std::uint64_t state_ = kFnvOffset;
};

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace robustda
