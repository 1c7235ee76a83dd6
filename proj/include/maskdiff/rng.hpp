// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Named child stream of a root seed. Distinct names give independent streams.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) noexcept {
  return splitmix64(root ^ splitmix64(fnv1a64(name)));
}

/// Indexed child stream, e.g. one per generated item.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(root) + 0x632be59bd9b4e019ULL * (index + 1));
}

inline void fill_gaussian(Rng& rng, std::vector<float>& out) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (auto& v : out) v = normal(rng);
}

inline ImageTensor gaussian_like(Rng& rng, int channels, int height, int width) {
  ImageTensor t(channels, height, width);
  fill_gaussian(rng, t.values);
  return t;
}

}  // namespace maskdiff
