#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace distillforge {

using Rng = std::mt19937_64;

// FNV-1a; stable across platforms, unlike std::hash.
constexpr std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Named substream of a top-level seed: seed XOR hash(name).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return seed ^ stable_hash(name);
}

}  // namespace distillforge
