#pragma once

#include <cstdint>
#include <string_view>

namespace lorex {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Independent stream seed for a named stage, derived from the run seed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : stage) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return splitmix64(splitmix64(seed ^ h) + index);
}

}  // namespace lorex
