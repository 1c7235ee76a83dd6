// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "maskdiff/error.hpp"

namespace maskdiff {

/// Planar (CHW) float image. Pixel values live in [-1, 1] once loaded or
/// normalized; intermediate diffusion latents share the same type.
struct ImageTensor {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {
    if (c < 1 || h < 1 || w < 1) throw InvalidArgument("ImageTensor: dimensions must be positive");
  }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height) * width; }

  float& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  bool same_shape(const ImageTensor& other) const noexcept {
    return channels == other.channels && height == other.height && width == other.width;
  }

  bool all_finite() const noexcept {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

/// Binary region mask; every value is exactly 0 or 1.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {
    if (h < 1 || w < 1) throw InvalidArgument("BinaryMask: dimensions must be positive");
  }

  std::size_t size() const noexcept { return values.size(); }
  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (auto v : values) n += v;
    return n;
  }
  double area_fraction() const noexcept {
    return values.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(values.size());
  }
  bool empty_region() const noexcept { return count() == 0; }

  bool is_binary() const noexcept {
    return std::all_of(values.begin(), values.end(), [](std::uint8_t v) { return v <= 1; });
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// An image with its lesion mask. The unit that moves through the pipeline.
struct ImageMaskPair {
  std::string id;
  ImageTensor image;
  BinaryMask mask;
  std::map<std::string, std::string> meta;
};

inline void require_same_shape(const ImageTensor& a, const ImageTensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeMismatch(std::string(what) + ": tensor shapes differ (" + std::to_string(a.channels) + "x" +
                        std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                        std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                        std::to_string(b.width) + ")");
  }
}

inline void require_aligned(const ImageTensor& image, const BinaryMask& mask, const char* what) {
  if (image.height != mask.height || image.width != mask.width) {
    throw ShapeMismatch(std::string(what) + ": mask " + std::to_string(mask.height) + "x" +
                        std::to_string(mask.width) + " is not aligned with image " +
                        std::to_string(image.height) + "x" + std::to_string(image.width));
  }
}

inline void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeMismatch(std::string(what) + ": mask shapes differ");
  }
}

}  // namespace maskdiff
