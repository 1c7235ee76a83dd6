// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "maskdiff/error.hpp"

namespace maskdiff {

/// A prompt token with a learned conditioning embedding. The text is a made-up
/// word so it never collides with ordinary vocabulary.
struct TriggerToken {
  std::string text;
  std::vector<float> embedding;

  friend bool operator==(const TriggerToken&, const TriggerToken&) = default;
};

inline constexpr std::array<std::string_view, 24> kReservedWords = {
    "a",     "an",    "the",    "of",     "image", "photo", "picture", "lesion",
    "skin",  "tumor", "mask",   "normal", "healthy", "background", "and", "with",
    "in",    "on",    "scan",   "tissue", "medical", "ultrasound", "breast", "thyroid"};

inline void validate_token_text(std::string_view text) {
  if (text.empty()) throw InvalidArgument("trigger token text must not be empty");
  if (std::any_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c) != 0; })) {
    throw InvalidArgument("trigger token '" + std::string(text) + "' must be a single whitespace-free token");
  }
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (std::find(kReservedWords.begin(), kReservedWords.end(), lower) != kReservedWords.end()) {
    throw InvalidArgument("trigger token '" + std::string(text) + "' collides with a reserved word");
  }
}

inline TriggerToken make_trigger_token(std::string text, int dim, std::uint64_t seed) {
  validate_token_text(text);
  if (dim < 1) throw InvalidArgument("trigger token embedding dimension must be positive");
  TriggerToken token{std::move(text), std::vector<float>(static_cast<std::size_t>(dim))};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& v : token.embedding) v = static_cast<float>(normal(rng));
  return token;
}

}  // namespace maskdiff
