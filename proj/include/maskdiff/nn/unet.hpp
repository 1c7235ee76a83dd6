// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/error.hpp"
#include "maskdiff/nn/layers.hpp"

namespace maskdiff {

enum class Conditioning { none, trigger_token };

inline std::string to_string(Conditioning c) { return c == Conditioning::none ? "none" : "trigger_token"; }
inline Conditioning parse_conditioning(const std::string& s) {
  if (s == "none") return Conditioning::none;
  if (s == "trigger_token") return Conditioning::trigger_token;
  throw InvalidArgument("unknown conditioning '" + s + "'");
}

/// Architecture descriptor for the U-Nets used throughout the project
/// (denoisers and the segmenter).
struct DenoiserSpec {
  int levels = 4;
  std::vector<int> channel_widths{64, 128, 256, 512};
  Conditioning conditioning = Conditioning::none;
  /// 0 disables the timestep pathway (the segmenter has no timestep).
  int timestep_embedding_dim = 64;
  int input_channels = 1;
  int output_channels = 1;

  void validate() const {
    if (levels < 1) throw InvalidArgument("DenoiserSpec: levels must be >= 1");
    if (static_cast<int>(channel_widths.size()) != levels) {
      throw InvalidArgument("DenoiserSpec: channel_widths length must equal levels");
    }
    for (int w : channel_widths) {
      if (w < 1) throw InvalidArgument("DenoiserSpec: channel widths must be positive");
    }
    if (timestep_embedding_dim < 0 || timestep_embedding_dim % 2 != 0) {
      throw InvalidArgument("DenoiserSpec: timestep_embedding_dim must be a non-negative even number");
    }
    if (conditioning == Conditioning::trigger_token && timestep_embedding_dim == 0) {
      throw InvalidArgument("DenoiserSpec: trigger-token conditioning needs a timestep embedding");
    }
    if (input_channels < 1 || output_channels < 1) {
      throw InvalidArgument("DenoiserSpec: channel counts must be positive");
    }
  }

  /// Input side length must be divisible by this.
  int size_multiple() const noexcept { return 1 << (levels - 1); }

  friend bool operator==(const DenoiserSpec&, const DenoiserSpec&) = default;
};

namespace nn {

/// conv3x3 -> (+ per-channel timestep bias) -> SiLU, with an identity
/// shortcut when the channel count is unchanged.
struct Block {
  Conv2d conv;
  Dense proj;  // unused when has_proj is false
  bool has_proj = false;
  bool residual = false;
};

template <typename T>
struct BlockCache {
  Activation<T> input;
  Activation<T> pre;
};

/// Plain U-Net: stem, one block per level on the way down (2x average pool
/// between levels), a bottleneck block, then nearest-upsample + 1x1 projection
/// + additive skip + block on the way up, and a 3x3 head.
///
/// Parameters live in a caller-owned flat vector; the network object only
/// holds the layout. Forward/backward are const and reentrant.
template <typename T>
class UNet {
 public:
  struct Tape {
    int batch = 0;
    RowMatrix<T> sinusoid;  // N x D
    RowMatrix<T> hidden_pre;  // N x D
    RowMatrix<T> hidden;  // N x D
    RowMatrix<T> embed_pre;  // N x D (includes condition)
    RowMatrix<T> embed;  // N x D after SiLU, feeds block projections
    Activation<T> stem_input;
    std::vector<BlockCache<T>> enc;
    std::vector<Activation<T>> skips;  // encoder outputs
    BlockCache<T> mid;
    std::vector<Activation<T>> up_input;  // upsampled tensor entering the 1x1 projection
    std::vector<BlockCache<T>> dec;
    Activation<T> head_input;
  };

  explicit UNet(DenoiserSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const int D = spec_.timestep_embedding_dim;
    const auto& w = spec_.channel_widths;
    const int L = spec_.levels;
    if (D > 0) {
      time1_ = add_dense(D, D);
      time2_ = add_dense(D, D);
    }
    stem_ = add_conv(spec_.input_channels, w[0], 3);
    for (int i = 0; i < L; ++i) enc_.push_back(add_block(i == 0 ? w[0] : w[i - 1], w[i]));
    mid_ = add_block(w[L - 1], w[L - 1]);
    for (int i = 0; i + 1 < L; ++i) {
      up_.push_back(add_conv(w[i + 1], w[i], 1));
      dec_.push_back(add_block(w[i], w[i]));
    }
    head_ = add_conv(w[0], spec_.output_channels, 3);
  }

  const DenoiserSpec& spec() const noexcept { return spec_; }
  std::size_t parameter_count() const noexcept { return count_; }

  /// He-normal weights, zero biases, zero-initialized head. Values are drawn
  /// in double so float and double instances agree for a given seed.
  void initialize(std::span<T> params, std::uint64_t seed) const {
    if (params.size() != count_) throw ShapeMismatch("UNet::initialize: parameter vector has wrong size");
    std::fill(params.begin(), params.end(), T(0));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill = [&](std::size_t offset, std::size_t count, double stddev) {
      for (std::size_t i = 0; i < count; ++i) params[offset + i] = static_cast<T>(normal(rng) * stddev);
    };
    auto fill_conv = [&](const Conv2d& c, double gain) {
      fill(c.weight_offset, c.weight_count(), gain * std::sqrt(2.0 / static_cast<double>(c.fan_in())));
    };
    auto fill_dense = [&](const Dense& d, double gain) {
      fill(d.weight_offset, static_cast<std::size_t>(d.in) * d.out, gain * std::sqrt(1.0 / d.in));
    };
    if (spec_.timestep_embedding_dim > 0) {
      fill_dense(time1_, 1.0);
      fill_dense(time2_, 1.0);
    }
    fill_conv(stem_, 1.0);
    auto fill_block = [&](const Block& b) {
      // Shortcut blocks start small so the identity path dominates early on.
      fill_conv(b.conv, b.residual ? 0.5 : 1.0);
      if (b.has_proj) fill_dense(b.proj, 1.0);
    };
    for (const auto& b : enc_) fill_block(b);
    fill_block(mid_);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      fill_conv(up_[i], 1.0);
      fill_block(dec_[i]);
    }
    // head stays zero
  }

  /// x: (input_channels, N, H, W). timesteps: N entries (ignored without a
  /// timestep pathway). condition: D-vector added to the timestep embedding
  /// for every batch item, or nullptr.
  Activation<T> forward(std::span<const T> params, const Activation<T>& x, std::span<const int> timesteps,
                        const T* condition, Tape* tape) const {
    check_input(params, x);
    const T* p = params.data();
    Tape local;
    Tape& tp = tape != nullptr ? *tape : local;
    tp.batch = x.batch;
    const bool timed = spec_.timestep_embedding_dim > 0;
    if (timed) {
      if (static_cast<int>(timesteps.size()) != x.batch) {
        throw ShapeMismatch("UNet::forward: one timestep per batch item required");
      }
      embed_forward(p, timesteps, condition, tp);
    }
    const RowMatrix<T>* emb = timed ? &tp.embed : nullptr;

    const int L = spec_.levels;
    tp.stem_input = x;
    Activation<T> h = conv_forward(stem_, p, x);
    tp.enc.assign(static_cast<std::size_t>(L), {});
    tp.skips.assign(static_cast<std::size_t>(L), {});
    for (int i = 0; i < L; ++i) {
      if (i > 0) h = avg_pool2(h);
      h = block_forward(enc_[i], p, std::move(h), emb, tp.enc[i]);
      if (i + 1 < L) tp.skips[i] = h;
    }
    h = block_forward(mid_, p, std::move(h), emb, tp.mid);
    tp.up_input.assign(up_.size(), {});
    tp.dec.assign(dec_.size(), {});
    for (int i = L - 2; i >= 0; --i) {
      tp.up_input[i] = upsample2(h);
      h = conv_forward(up_[i], p, tp.up_input[i]);
      add_into(h, tp.skips[i]);
      h = block_forward(dec_[i], p, std::move(h), emb, tp.dec[i]);
    }
    tp.head_input = std::move(h);
    return conv_forward(head_, p, tp.head_input);
  }

  /// Accumulates parameter gradients into `grads`; condition gradient (summed
  /// over the batch) is accumulated into `condition_grad` when non-null.
  void backward(std::span<const T> params, const Tape& tp, const Activation<T>& grad_out, std::span<T> grads,
                T* condition_grad) const {
    if (grads.size() != count_) throw ShapeMismatch("UNet::backward: gradient vector has wrong size");
    const T* p = params.data();
    T* g = grads.data();
    const int L = spec_.levels;
    const bool timed = spec_.timestep_embedding_dim > 0;
    RowMatrix<T> d_embed;
    if (timed) d_embed = RowMatrix<T>::Zero(tp.batch, spec_.timestep_embedding_dim);
    RowMatrix<T>* de = timed ? &d_embed : nullptr;
    const RowMatrix<T>* emb = timed ? &tp.embed : nullptr;

    Activation<T> dh(tp.head_input.channels, tp.head_input.batch, tp.head_input.height, tp.head_input.width);
    conv_backward(head_, p, tp.head_input, grad_out, g, &dh);

    std::vector<Activation<T>> d_skip(static_cast<std::size_t>(L));
    for (int i = 0; i + 1 < L; ++i) {
      dh = block_backward(dec_[i], p, tp.dec[i], dh, emb, g, de);
      d_skip[i] = dh;
      Activation<T> du(up_[i].in, tp.up_input[i].batch, tp.up_input[i].height, tp.up_input[i].width);
      conv_backward(up_[i], p, tp.up_input[i], dh, g, &du);
      dh = upsample2_backward(du);
    }
    dh = block_backward(mid_, p, tp.mid, dh, emb, g, de);
    for (int i = L - 1; i >= 0; --i) {
      if (i + 1 < L) add_into(dh, d_skip[i]);
      dh = block_backward(enc_[i], p, tp.enc[i], dh, emb, g, de);
      if (i > 0) dh = avg_pool2_backward(dh);
    }
    conv_backward(stem_, p, tp.stem_input, dh, g, static_cast<Activation<T>*>(nullptr));
    if (timed) embed_backward(p, tp, d_embed, g, condition_grad);
  }

 private:
  Conv2d add_conv(int in, int out, int k) {
    Conv2d c{in, out, k, count_, 0};
    count_ += c.weight_count();
    c.bias_offset = count_;
    count_ += static_cast<std::size_t>(out);
    return c;
  }
  Dense add_dense(int in, int out) {
    Dense d{in, out, count_, 0};
    count_ += static_cast<std::size_t>(in) * out;
    d.bias_offset = count_;
    count_ += static_cast<std::size_t>(out);
    return d;
  }
  Block add_block(int in, int out) {
    Block b;
    b.conv = add_conv(in, out, 3);
    b.residual = in == out;
    if (spec_.timestep_embedding_dim > 0) {
      b.has_proj = true;
      b.proj = add_dense(spec_.timestep_embedding_dim, out);
    }
    return b;
  }

  void check_input(std::span<const T> params, const Activation<T>& x) const {
    if (params.size() != count_) throw ShapeMismatch("UNet: parameter vector has wrong size");
    if (x.channels != spec_.input_channels) throw ShapeMismatch("UNet: input channel count mismatch");
    const int m = spec_.size_multiple();
    if (x.height % m != 0 || x.width % m != 0 || x.height < m || x.width < m) {
      throw ShapeMismatch("UNet: input size " + std::to_string(x.height) + "x" + std::to_string(x.width) +
                          " must be a multiple of " + std::to_string(m));
    }
  }

  void embed_forward(const T* p, std::span<const int> timesteps, const T* condition, Tape& tp) const {
    const int D = spec_.timestep_embedding_dim;
    const int half = D / 2;
    tp.sinusoid.resize(static_cast<Eigen::Index>(timesteps.size()), D);
    for (std::size_t n = 0; n < timesteps.size(); ++n) {
      for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = static_cast<double>(timesteps[n]) * freq;
        tp.sinusoid(static_cast<Eigen::Index>(n), 2 * i) = static_cast<T>(std::sin(arg));
        tp.sinusoid(static_cast<Eigen::Index>(n), 2 * i + 1) = static_cast<T>(std::cos(arg));
      }
    }
    tp.hidden_pre = dense_forward(time1_, p, tp.sinusoid);
    tp.hidden.resize(tp.hidden_pre.rows(), tp.hidden_pre.cols());
    silu_forward(tp.hidden_pre.data(), tp.hidden.data(), static_cast<std::size_t>(tp.hidden.size()));
    tp.embed_pre = dense_forward(time2_, p, tp.hidden);
    if (condition != nullptr) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> c(condition, D);
      tp.embed_pre.rowwise() += c;
    }
    tp.embed.resize(tp.embed_pre.rows(), tp.embed_pre.cols());
    silu_forward(tp.embed_pre.data(), tp.embed.data(), static_cast<std::size_t>(tp.embed.size()));
  }

  void embed_backward(const T* p, const Tape& tp, const RowMatrix<T>& d_embed, T* g, T* condition_grad) const {
    RowMatrix<T> d_pre(d_embed.rows(), d_embed.cols());
    silu_backward(tp.embed_pre.data(), d_embed.data(), d_pre.data(), static_cast<std::size_t>(d_pre.size()));
    if (condition_grad != nullptr) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> cg(condition_grad, d_pre.cols());
      cg += d_pre.colwise().sum();
    }
    RowMatrix<T> d_hidden = RowMatrix<T>::Zero(tp.hidden.rows(), tp.hidden.cols());
    dense_backward(time2_, p, tp.hidden, d_pre, g, &d_hidden);
    RowMatrix<T> d_hidden_pre(d_hidden.rows(), d_hidden.cols());
    silu_backward(tp.hidden_pre.data(), d_hidden.data(), d_hidden_pre.data(),
                  static_cast<std::size_t>(d_hidden_pre.size()));
    dense_backward(time1_, p, tp.sinusoid, d_hidden_pre, g, static_cast<RowMatrix<T>*>(nullptr));
  }

  static Activation<T> block_forward(const Block& b, const T* p, Activation<T> x, const RowMatrix<T>* emb,
                                     BlockCache<T>& cache) {
    cache.input = std::move(x);
    cache.pre = conv_forward(b.conv, p, cache.input);
    if (b.has_proj && emb != nullptr) {
      const RowMatrix<T> bias = dense_forward(b.proj, p, *emb);  // N x out
      for (int c = 0; c < cache.pre.channels; ++c) {
        for (int n = 0; n < cache.pre.batch; ++n) {
          ArrayMap<T>(cache.pre.plane_ptr(c, n), static_cast<Eigen::Index>(cache.pre.plane())) += bias(n, c);
        }
      }
    }
    Activation<T> y(cache.pre.channels, cache.pre.batch, cache.pre.height, cache.pre.width);
    silu_forward(cache.pre.data.data(), y.data.data(), y.data.size());
    if (b.residual) add_into(y, cache.input);
    return y;
  }

  static Activation<T> block_backward(const Block& b, const T* p, const BlockCache<T>& cache, const Activation<T>& dy,
                                      const RowMatrix<T>* emb, T* g, RowMatrix<T>* d_embed) {
    Activation<T> d_pre(dy.channels, dy.batch, dy.height, dy.width);
    silu_backward(cache.pre.data.data(), dy.data.data(), d_pre.data.data(), d_pre.data.size());
    if (b.has_proj && emb != nullptr) {
      RowMatrix<T> d_bias(d_pre.batch, d_pre.channels);
      for (int c = 0; c < d_pre.channels; ++c) {
        for (int n = 0; n < d_pre.batch; ++n) {
          d_bias(n, c) = ConstArrayMap<T>(d_pre.plane_ptr(c, n), static_cast<Eigen::Index>(d_pre.plane())).sum();
        }
      }
      dense_backward(b.proj, p, *emb, d_bias, g, d_embed);
    }
    Activation<T> dx(cache.input.channels, cache.input.batch, cache.input.height, cache.input.width);
    if (b.residual) dx.data = dy.data;
    conv_backward(b.conv, p, cache.input, d_pre, g, &dx);
    return dx;
  }

  DenoiserSpec spec_;
  std::size_t count_ = 0;
  Dense time1_;
  Dense time2_;
  Conv2d stem_;
  std::vector<Block> enc_;
  Block mid_;
  std::vector<Conv2d> up_;
  std::vector<Block> dec_;
  Conv2d head_;
};

}  // namespace nn
}  // namespace maskdiff
