#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace msmamba {

/// splitmix64 finalizer; good bit diffusion for seed derivation.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic sub-seed from (base seed, purpose string, counter).
/// All randomness in a run flows from one base seed through this.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose,
                                 std::uint64_t counter = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the purpose bytes
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(base ^ mix64(h) ^ mix64(counter * 0x9e3779b97f4a7c15ULL + 1));
}

inline std::mt19937_64 make_rng(std::uint64_t base, std::string_view purpose,
                                std::uint64_t counter = 0) {
  return std::mt19937_64(derive_seed(base, purpose, counter));
}

}  // namespace msmamba
