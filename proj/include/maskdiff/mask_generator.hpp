// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/curation.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/resize.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff {

/// The mask generator's architecture is fixed; only the training budget and
/// resolution vary.
inline DenoiserSpec mask_model_spec() {
  DenoiserSpec s;
  s.levels = 4;
  s.channel_widths = {64, 128, 256, 512};
  s.conditioning = Conditioning::none;
  s.timestep_embedding_dim = 64;
  s.input_channels = 1;
  s.output_channels = 1;
  return s;
}

struct MaskModelConfig {
  DenoiserSpec spec = mask_model_spec();
  int iterations = 400;
  int batch_size = 8;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  int image_size = 32;
  ScheduleParams schedule{200, 1e-4, 0.02};
  double grad_clip = 1.0;

  void validate() const {
    if (!(spec == mask_model_spec())) {
      throw InvalidArgument("MaskModelConfig: spec must be 4 levels with widths [64,128,256,512], single channel");
    }
    if (iterations < 1 || batch_size < 1) throw InvalidArgument("MaskModelConfig: iterations and batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("MaskModelConfig: learning_rate must be positive");
    if (image_size < spec.size_multiple() || image_size % spec.size_multiple() != 0) {
      throw InvalidArgument("MaskModelConfig: image_size must be a multiple of " +
                            std::to_string(spec.size_multiple()));
    }
  }
};

/// {0,1} -> {-1,1}.
inline ImageTensor mask_to_tensor(const BinaryMask& m) {
  ImageTensor t(1, m.height, m.width);
  for (std::size_t i = 0; i < m.size(); ++i) t.values[i] = m.values[i] ? 1.0f : -1.0f;
  return t;
}

struct MaskTrainResult {
  Checkpoint checkpoint;
  std::vector<double> loss_trace;
};

/// Unconditional epsilon-MSE training over whole mask images.
inline MaskTrainResult train_mask_model(std::span<const BinaryMask> masks, const MaskModelConfig& config,
                                        const ProgressFn& progress = {}) {
  config.validate();
  if (masks.empty()) throw EmptyDataset("train_mask_model: no masks");
  std::vector<ImageTensor> images;
  images.reserve(masks.size());
  for (const auto& m : masks) {
    if (m.height != config.image_size || m.width != config.image_size) {
      throw ShapeMismatch("train_mask_model: masks must be " + std::to_string(config.image_size) + "x" +
                          std::to_string(config.image_size));
    }
    images.push_back(mask_to_tensor(m));
  }
  const NoiseSchedule schedule = make_schedule(config.schedule);
  MaskTrainResult result;
  result.checkpoint = build_denoiser(config.spec, derive_seed(config.seed, "init"), config.schedule, "mask");
  result.checkpoint.image_size = config.image_size;
  const detail::SampleLoss mse = [](std::size_t, int, const ImageTensor&, const ImageTensor&, const ImageTensor& eps,
                                    const ImageTensor& eps_hat, ImageTensor& grad) {
    double sum = 0.0;
    const double n = static_cast<double>(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const double d = static_cast<double>(eps_hat.values[i]) - eps.values[i];
      sum += d * d;
      grad.values[i] = static_cast<float>(2.0 * d / n);
    }
    return sum / n;
  };
  DiffusionTrainOptions opt{config.iterations, config.batch_size, config.learning_rate, config.grad_clip,
                            derive_seed(config.seed, "train")};
  result.loss_trace = detail::train_denoiser(config.spec, result.checkpoint.weights, nullptr, images, schedule, opt,
                                             mse, progress);
  return result;
}

// ---------------------------------------------------------------------------
// Sampling

/// Model output in [-1, 1] mapped to [0, 1] and clamped.
inline ImageTensor rescale_unit(const ImageTensor& raw) {
  ImageTensor out = raw;
  for (auto& v : out.values) v = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
  return out;
}

/// 1 where value >= threshold. `unit` is a single-channel [0, 1] image.
inline BinaryMask threshold_mask(const ImageTensor& unit, double threshold) {
  if (unit.channels != 1) throw ShapeMismatch("threshold_mask: expects a single channel");
  BinaryMask m(unit.height, unit.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = unit.values[i] >= threshold ? 1 : 0;
  return m;
}

/// Re-thresholding a binary mask (as {0,1} values) is the identity.
inline BinaryMask threshold_mask(const BinaryMask& mask, double threshold) {
  BinaryMask m = mask;
  for (auto& v : m.values) v = static_cast<double>(v) >= threshold ? 1 : 0;
  return m;
}

struct MaskSample {
  ImageTensor raw;  // [0, 1]-rescaled model output
  BinaryMask binary;
  double area_fraction = 0.0;
  std::uint64_t seed = 0;
  std::size_t draw = 0;  // index in the draw sequence
};

struct MaskSamplingOptions {
  double threshold = 0.5;
  double min_area = 0.01;
  double max_area = 0.6;
  int batch = 16;
  bool stochastic = true;
};

/// Decides one raw draw: binarize and apply the area gate.
inline bool accept_mask(const ImageTensor& unit, double threshold, double min_area, double max_area,
                        MaskSample* out = nullptr) {
  BinaryMask b = threshold_mask(unit, threshold);
  const double area = b.area_fraction();
  const bool ok = area >= min_area && area <= max_area;
  if (out != nullptr) {
    out->raw = unit;
    out->binary = std::move(b);
    out->area_fraction = area;
  }
  return ok;
}

/// Draw k uses seed derive_seed(seed, k); draws are evaluated in fixed chunks
/// of `batch`. Stops after n acceptances, or throws BudgetExhausted after 10n
/// draws.
inline std::vector<MaskSample> sample_masks(const Checkpoint& model, int n, std::uint64_t seed,
                                            const NoiseSchedule& schedule, const MaskSamplingOptions& opt = {}) {
  if (n < 1) throw InvalidArgument("sample_masks: n must be >= 1");
  if (!(opt.threshold > 0.0 && opt.threshold < 1.0)) throw InvalidArgument("sample_masks: threshold must be in (0,1)");
  if (!(opt.min_area >= 0.0 && opt.min_area < opt.max_area && opt.max_area <= 1.0)) {
    throw InvalidArgument("sample_masks: need 0 <= min_area < max_area <= 1");
  }
  if (model.spec.conditioning != Conditioning::none || model.spec.input_channels != 1) {
    throw InvalidArgument("sample_masks: expects an unconditioned single-channel model");
  }
  const int size = model.image_size;
  if (size < 1 || size % model.spec.size_multiple() != 0) {
    throw InvalidArgument("sample_masks: checkpoint does not record a usable mask resolution");
  }

  const std::size_t budget = 10 * static_cast<std::size_t>(n);
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, opt.batch));
  std::vector<MaskSample> accepted;
  std::size_t drawn = 0;
  const ImageTensor zeros(1, size, size);
  const BinaryMask everywhere(size, size, 1);
  while (accepted.size() < static_cast<std::size_t>(n) && drawn < budget) {
    const std::size_t k = std::min(chunk, budget - drawn);
    std::vector<GuidanceRequest> reqs;
    for (std::size_t i = 0; i < k; ++i) {
      reqs.push_back({zeros, everywhere, &model, std::nullopt, derive_seed(seed, drawn + i), opt.stochastic});
    }
    const auto raw = generate_batch(reqs, schedule);
    for (std::size_t i = 0; i < k && accepted.size() < static_cast<std::size_t>(n); ++i) {
      MaskSample s;
      if (accept_mask(rescale_unit(raw[i].image), opt.threshold, opt.min_area, opt.max_area, &s)) {
        s.seed = reqs[i].seed;
        s.draw = drawn + i;
        accepted.push_back(std::move(s));
      }
    }
    drawn += k;
  }
  if (accepted.size() < static_cast<std::size_t>(n)) {
    const double rate = static_cast<double>(accepted.size()) / static_cast<double>(drawn);
    throw BudgetExhausted("sample_masks: only " + std::to_string(accepted.size()) + " of " + std::to_string(n) +
                              " masks accepted after " + std::to_string(drawn) + " draws",
                          rate);
  }
  return accepted;
}

// ---------------------------------------------------------------------------
// Classic augmentation

struct MaskOp {
  enum class Kind { flip_h, flip_v, erode } kind = Kind::flip_h;
  int radius = 1;

  static MaskOp flip_h() { return {Kind::flip_h, 0}; }
  static MaskOp flip_v() { return {Kind::flip_v, 0}; }
  static MaskOp erode(int r) { return {Kind::erode, r}; }
};

inline BinaryMask flip_horizontal(const BinaryMask& m) {
  BinaryMask out = m;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
  }
  return out;
}

inline BinaryMask flip_vertical(const BinaryMask& m) {
  BinaryMask out = m;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(m.height - 1 - y, x);
  }
  return out;
}

inline BinaryMask classic_augment(const BinaryMask& mask, std::span<const MaskOp> ops) {
  BinaryMask out = mask;
  for (const auto& op : ops) {
    switch (op.kind) {
      case MaskOp::Kind::flip_h: out = flip_horizontal(out); break;
      case MaskOp::Kind::flip_v: out = flip_vertical(out); break;
      case MaskOp::Kind::erode: out = erode_mask(out, op.radius, 1); break;
    }
  }
  return out;
}

/// Nearest-neighbour resize to size x size; keeps masks binary.
inline BinaryMask upsample_mask(const BinaryMask& m, int size) { return resize_nearest(m, size, size); }

}  // namespace maskdiff
