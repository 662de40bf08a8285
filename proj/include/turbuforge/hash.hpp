#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace turbuforge {

/// 64-bit FNV-1a; stable across platforms and runs (unlike std::hash).
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace turbuforge
