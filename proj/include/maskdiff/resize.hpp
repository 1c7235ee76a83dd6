// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

inline ImageTensor resize_bilinear(const ImageTensor& src, int h, int w) {
  ImageTensor out(src.channels, h, w);
  const double sy = static_cast<double>(src.height) / h;
  const double sx = static_cast<double>(src.width) / w;
  for (int c = 0; c < src.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const double wy = fy - y0;
      for (int x = 0; x < w; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, src.width - 1);
        const double wx = fx - x0;
        const double v = (1 - wy) * ((1 - wx) * src.at(c, y0, x0) + wx * src.at(c, y0, x1)) +
                         wy * ((1 - wx) * src.at(c, y1, x0) + wx * src.at(c, y1, x1));
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline BinaryMask resize_nearest(const BinaryMask& src, int h, int w) {
  BinaryMask out(h, w);
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / h));
    for (int x = 0; x < w; ++x) {
      const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / w));
      out.at(y, x) = src.at(sy, sx);
    }
  }
  return out;
}

}  // namespace maskdiff
