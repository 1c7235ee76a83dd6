// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <random>
#include <vector>

#include "maskdiff/aligned.hpp"
#include "maskdiff/error.hpp"

namespace maskdiff::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

/// Batched feature map in channel-major (C, N, H, W) layout, so a channel's
/// values across the whole batch form one contiguous GEMM row.
template <typename T>
struct Activation {
  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  AlignedVector<T> data;

  Activation() = default;
  Activation(int c, int n, int h, int w)
      : channels(c), batch(n), height(h), width(w), data(static_cast<std::size_t>(c) * n * h * w, T(0)) {}

  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  std::size_t columns() const noexcept { return static_cast<std::size_t>(batch) * plane(); }
  T* plane_ptr(int c, int n) noexcept { return data.data() + static_cast<std::size_t>(c) * columns() + n * plane(); }
  const T* plane_ptr(int c, int n) const noexcept {
    return data.data() + static_cast<std::size_t>(c) * columns() + n * plane();
  }
  MatrixMap<T> matrix() { return MatrixMap<T>(data.data(), channels, static_cast<Eigen::Index>(columns())); }
  ConstMatrixMap<T> matrix() const {
    return ConstMatrixMap<T>(data.data(), channels, static_cast<Eigen::Index>(columns()));
  }
  bool same_shape(const Activation& o) const noexcept {
    return channels == o.channels && batch == o.batch && height == o.height && width == o.width;
  }
};

template <typename T>
inline void add_into(Activation<T>& dst, const Activation<T>& src) {
  ArrayMap<T>(dst.data.data(), static_cast<Eigen::Index>(dst.data.size())) +=
      ConstArrayMap<T>(src.data.data(), static_cast<Eigen::Index>(src.data.size()));
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
inline void silu_forward(const T* pre, T* out, std::size_t n) {
  ConstArrayMap<T> a(pre, static_cast<Eigen::Index>(n));
  ArrayMap<T>(out, static_cast<Eigen::Index>(n)) = a / (T(1) + (-a).exp());
}

/// grad_pre = grad_out * silu'(pre)
template <typename T>
inline void silu_backward(const T* pre, const T* grad_out, T* grad_pre, std::size_t n) {
  ConstArrayMap<T> a(pre, static_cast<Eigen::Index>(n));
  ConstArrayMap<T> g(grad_out, static_cast<Eigen::Index>(n));
  const auto sig = (T(1) / (T(1) + (-a).exp())).eval();
  ArrayMap<T>(grad_pre, static_cast<Eigen::Index>(n)) = g * sig * (T(1) + a * (T(1) - sig));
}

template <typename T>
inline Activation<T> avg_pool2(const Activation<T>& x) {
  if (x.height % 2 != 0 || x.width % 2 != 0) throw ShapeMismatch("avg_pool2: spatial size must be even");
  Activation<T> y(x.channels, x.batch, x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const T* src = x.plane_ptr(c, n);
      T* dst = y.plane_ptr(c, n);
      for (int yy = 0; yy < y.height; ++yy) {
        const T* r0 = src + static_cast<std::size_t>(2 * yy) * x.width;
        const T* r1 = r0 + x.width;
        for (int xx = 0; xx < y.width; ++xx) {
          dst[yy * y.width + xx] = T(0.25) * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
        }
      }
    }
  }
  return y;
}

template <typename T>
inline Activation<T> avg_pool2_backward(const Activation<T>& dy) {
  Activation<T> dx(dy.channels, dy.batch, dy.height * 2, dy.width * 2);
  for (int c = 0; c < dy.channels; ++c) {
    for (int n = 0; n < dy.batch; ++n) {
      const T* src = dy.plane_ptr(c, n);
      T* dst = dx.plane_ptr(c, n);
      for (int yy = 0; yy < dx.height; ++yy) {
        for (int xx = 0; xx < dx.width; ++xx) {
          dst[yy * dx.width + xx] = T(0.25) * src[(yy / 2) * dy.width + xx / 2];
        }
      }
    }
  }
  return dx;
}

template <typename T>
inline Activation<T> upsample2(const Activation<T>& x) {
  Activation<T> y(x.channels, x.batch, x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const T* src = x.plane_ptr(c, n);
      T* dst = y.plane_ptr(c, n);
      for (int yy = 0; yy < y.height; ++yy) {
        for (int xx = 0; xx < y.width; ++xx) dst[yy * y.width + xx] = src[(yy / 2) * x.width + xx / 2];
      }
    }
  }
  return y;
}

template <typename T>
inline Activation<T> upsample2_backward(const Activation<T>& dy) {
  Activation<T> dx(dy.channels, dy.batch, dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels; ++c) {
    for (int n = 0; n < dy.batch; ++n) {
      const T* src = dy.plane_ptr(c, n);
      T* dst = dx.plane_ptr(c, n);
      for (int yy = 0; yy < dy.height; ++yy) {
        for (int xx = 0; xx < dy.width; ++xx) dst[(yy / 2) * dx.width + xx / 2] += src[yy * dy.width + xx];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, "same" zero padding, odd square kernel)

/// Per-thread grow-only im2col buffer, reused across calls so convolutions do
/// not page-fault a fresh multi-megabyte allocation every time.
template <typename T>
inline MatrixMap<T> scratch_columns(std::size_t count, Eigen::Index rows, Eigen::Index cols) {
  thread_local AlignedVector<T> buffer;
  if (buffer.size() < count) buffer.resize(count);
  return MatrixMap<T>(buffer.data(), rows, cols);
}

template <typename T>
inline MatrixMap<T> im2col(const Activation<T>& x, int k) {
  const int pad = k / 2;
  const auto cols = static_cast<Eigen::Index>(x.columns());
  const auto rows = static_cast<Eigen::Index>(x.channels) * k * k;
  MatrixMap<T> col = scratch_columns<T>(static_cast<std::size_t>(rows * cols), rows, cols);
  const int H = x.height;
  const int W = x.width;
  for (int c = 0; c < x.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * cols;
        const int dy = ky - pad;
        const int dx = kx - pad;
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(W, W - dx);
        for (int n = 0; n < x.batch; ++n) {
          const T* src = x.plane_ptr(c, n);
          T* dst = row + static_cast<std::size_t>(n) * x.plane();
          for (int y = 0; y < H; ++y) {
            T* out = dst + static_cast<std::size_t>(y) * W;
            const int sy = y + dy;
            if (sy < 0 || sy >= H || x_lo >= x_hi) {
              std::fill(out, out + W, T(0));
              continue;
            }
            std::fill(out, out + x_lo, T(0));
            std::memcpy(out + x_lo, src + static_cast<std::size_t>(sy) * W + x_lo + dx,
                        sizeof(T) * static_cast<std::size_t>(x_hi - x_lo));
            std::fill(out + x_hi, out + W, T(0));
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
inline void col2im_add(const MatrixMap<T>& col, int k, Activation<T>& dx) {
  const int pad = k / 2;
  const auto cols = static_cast<Eigen::Index>(dx.columns());
  const int H = dx.height;
  const int W = dx.width;
  for (int c = 0; c < dx.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * cols;
        const int dy = ky - pad;
        const int ddx = kx - pad;
        const int x_lo = std::max(0, -ddx);
        const int x_hi = std::min(W, W - ddx);
        for (int n = 0; n < dx.batch; ++n) {
          T* dst = dx.plane_ptr(c, n);
          const T* src = row + static_cast<std::size_t>(n) * dx.plane();
          for (int y = 0; y < H; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= H) continue;
            const T* in = src + static_cast<std::size_t>(y) * W;
            T* out = dst + static_cast<std::size_t>(sy) * W;
            for (int xx = x_lo; xx < x_hi; ++xx) out[xx + ddx] += in[xx];
          }
        }
      }
    }
  }
}

/// Parameter slots of a convolution inside a flat parameter vector.
struct Conv2d {
  int in = 0;
  int out = 0;
  int kernel = 3;
  std::size_t weight_offset = 0;  // out x (in * k * k), row-major
  std::size_t bias_offset = 0;    // out

  std::size_t fan_in() const noexcept { return static_cast<std::size_t>(in) * kernel * kernel; }
  std::size_t weight_count() const noexcept { return static_cast<std::size_t>(out) * fan_in(); }
};

template <typename T>
inline Activation<T> conv_forward(const Conv2d& conv, const T* params, const Activation<T>& x) {
  if (x.channels != conv.in) throw ShapeMismatch("conv_forward: input channel count mismatch");
  Activation<T> y(conv.out, x.batch, x.height, x.width);
  ConstMatrixMap<T> weight(params + conv.weight_offset, conv.out, static_cast<Eigen::Index>(conv.fan_in()));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(params + conv.bias_offset, conv.out);
  auto out = y.matrix();
  if (conv.kernel == 1) {
    out.noalias() = weight * x.matrix();
  } else {
    out.noalias() = weight * im2col(x, conv.kernel);
  }
  out.colwise() += bias;
  return y;
}

/// Accumulates weight/bias gradients into `grads`; when `dx` is non-null the
/// input gradient is added into it (it must already be shaped like x).
template <typename T>
inline void conv_backward(const Conv2d& conv, const T* params, const Activation<T>& x, const Activation<T>& dy,
                          T* grads, Activation<T>* dx) {
  ConstMatrixMap<T> weight(params + conv.weight_offset, conv.out, static_cast<Eigen::Index>(conv.fan_in()));
  MatrixMap<T> dweight(grads + conv.weight_offset, conv.out, static_cast<Eigen::Index>(conv.fan_in()));
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbias(grads + conv.bias_offset, conv.out);
  const auto g = dy.matrix();
  dbias += g.rowwise().sum();
  if (conv.kernel == 1) {
    dweight.noalias() += g * x.matrix().transpose();
    if (dx != nullptr) dx->matrix().noalias() += weight.transpose() * g;
    return;
  }
  MatrixMap<T> col = im2col(x, conv.kernel);
  dweight.noalias() += g * col.transpose();
  if (dx != nullptr) {
    col.noalias() = weight.transpose() * g;
    col2im_add(col, conv.kernel, *dx);
  }
}

// ---------------------------------------------------------------------------
// Dense layer on row-major (N x in) inputs.

struct Dense {
  int in = 0;
  int out = 0;
  std::size_t weight_offset = 0;  // out x in
  std::size_t bias_offset = 0;
};

template <typename T>
inline RowMatrix<T> dense_forward(const Dense& d, const T* params, const RowMatrix<T>& x) {
  ConstMatrixMap<T> weight(params + d.weight_offset, d.out, d.in);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(params + d.bias_offset, d.out);
  RowMatrix<T> y = x * weight.transpose();
  y.rowwise() += bias;
  return y;
}

template <typename T>
inline void dense_backward(const Dense& d, const T* params, const RowMatrix<T>& x, const RowMatrix<T>& dy, T* grads,
                           RowMatrix<T>* dx) {
  ConstMatrixMap<T> weight(params + d.weight_offset, d.out, d.in);
  MatrixMap<T> dweight(grads + d.weight_offset, d.out, d.in);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbias(grads + d.bias_offset, d.out);
  dweight.noalias() += dy.transpose() * x;
  dbias += dy.colwise().sum();
  if (dx != nullptr) dx->noalias() += dy * weight;
}

}  // namespace maskdiff::nn
