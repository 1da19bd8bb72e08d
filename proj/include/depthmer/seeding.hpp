#pragma once

#include <cstdint>
#include <string_view>

namespace depthmer {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  return mix64(base ^ mix64(salt));
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view salt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : salt) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return derive_seed(base, h);
}

}  // namespace depthmer
