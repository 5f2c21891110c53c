// Seeding helpers. Every random stream in the library is derived from an
// explicit (seed, index...) tuple so runs are reproducible.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace lsr1 {

using Rng = std::mt19937_64;

inline Rng seeded_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(keys.size() * 2);
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// Independent stream number `index` of `seed`.
inline Rng substream(std::uint64_t seed, std::uint64_t index) { return seeded_rng({seed, index}); }

/// Derives a child seed; used for per-iteration training batches.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  Rng rng = seeded_rng({seed, index, 0x5eedULL});
  return rng();
}

}  // namespace lsr1
