// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/logging.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/tensor.hpp"
#include "maskdiff/token.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff {

enum class MaskMode { lesion, inverted };

inline std::string to_string(MaskMode m) { return m == MaskMode::lesion ? "lesion" : "inverted"; }
inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "lesion") return MaskMode::lesion;
  if (s == "inverted") return MaskMode::inverted;
  throw InvalidArgument("unknown mask mode '" + s + "'");
}

struct FinetuneConfig {
  int iterations = 2000;
  int batch_size = 2;
  double learning_rate = 1e-4;
  MaskMode mask_mode = MaskMode::lesion;
  std::uint64_t seed = 0;
  ScheduleParams schedule{200, 1e-4, 0.02};
  int image_size = 64;
  double grad_clip = 1.0;

  void validate() const {
    if (iterations < 1) throw InvalidArgument("FinetuneConfig: iterations must be >= 1");
    if (batch_size < 1) throw InvalidArgument("FinetuneConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("FinetuneConfig: learning_rate must be positive");
    if (image_size < 1) throw InvalidArgument("FinetuneConfig: image_size must be positive");
  }
};

/// Swaps 0 and 1.
inline BinaryMask invert_mask(const BinaryMask& mask) {
  BinaryMask out = mask;
  for (auto& v : out.values) v = static_cast<std::uint8_t>(1 - v);
  return out;
}

/// w_t * mean over masked pixels of (x0_hat - x0)^2. The mask is broadcast
/// across channels. When `grad` is non-null it receives dLoss/dx0_hat.
inline double masked_loss(const ImageTensor& x0, const BinaryMask& mask, const ImageTensor& x0_hat, int t,
                          const NoiseSchedule& schedule, ImageTensor* grad = nullptr) {
  require_same_shape(x0, x0_hat, "masked_loss");
  require_aligned(x0, mask, "masked_loss");
  detail::check_step(schedule, t, "masked_loss");
  if (grad != nullptr) *grad = ImageTensor(x0.channels, x0.height, x0.width);
  const std::size_t masked = mask.count();
  if (masked == 0) {
    log_warning("masked_loss: all-zero mask, sample contributes no loss");
    return 0.0;
  }
  const double weight = schedule.loss_weights[t];
  const double denom = static_cast<double>(masked) * x0.channels;
  const std::size_t plane = x0.plane_size();
  double sum = 0.0;
  for (int c = 0; c < x0.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask.values[i] == 0) continue;
      const std::size_t k = c * plane + i;
      const double d = static_cast<double>(x0_hat.values[k]) - static_cast<double>(x0.values[k]);
      sum += d * d;
      if (grad != nullptr) grad->values[k] = static_cast<float>(weight * 2.0 * d / denom);
    }
  }
  return weight * sum / denom;
}

struct FinetuneResult {
  Checkpoint checkpoint;
  std::vector<double> loss_trace;
};

/// Trains every denoiser parameter plus the token embedding on the masked
/// reconstruction loss. Each step draws (pair, t, eps), noises the full image,
/// recovers x0_hat from the epsilon prediction and penalizes the error inside
/// the (optionally inverted) mask only.
inline FinetuneResult finetune(std::span<const ImageMaskPair> dataset, const Checkpoint& base,
                               const TriggerToken& token, const FinetuneConfig& config,
                               const ProgressFn& progress = {}) {
  config.validate();
  validate_token_text(token.text);
  if (dataset.empty()) throw EmptyDataset("finetune: dataset is empty");
  if (base.spec.conditioning != Conditioning::trigger_token) {
    throw InvalidArgument("finetune: base checkpoint must use trigger-token conditioning");
  }
  if (static_cast<int>(token.embedding.size()) != base.spec.timestep_embedding_dim) {
    throw ShapeMismatch("finetune: token embedding dimension does not match the denoiser");
  }
  std::vector<ImageTensor> images;
  std::vector<BinaryMask> masks;
  images.reserve(dataset.size());
  masks.reserve(dataset.size());
  for (const auto& pair : dataset) {
    if (pair.image.height != config.image_size || pair.image.width != config.image_size) {
      throw ShapeMismatch("finetune: pair '" + pair.id + "' is " + std::to_string(pair.image.height) + "x" +
                          std::to_string(pair.image.width) + ", expected " + std::to_string(config.image_size));
    }
    if (pair.image.channels != base.spec.input_channels) {
      throw ShapeMismatch("finetune: pair '" + pair.id + "' channel count does not match the denoiser");
    }
    require_aligned(pair.image, pair.mask, "finetune");
    images.push_back(pair.image);
    masks.push_back(config.mask_mode == MaskMode::inverted ? invert_mask(pair.mask) : pair.mask);
  }

  const NoiseSchedule schedule = make_schedule(config.schedule);
  FinetuneResult result;
  result.checkpoint = base;
  result.checkpoint.schedule = config.schedule;
  result.checkpoint.image_size = config.image_size;
  result.checkpoint.model_id = config.mask_mode == MaskMode::lesion ? "lesion" : "background";
  TriggerToken learned = token;

  const detail::SampleLoss loss = [&](std::size_t index, int t, const ImageTensor& x0, const ImageTensor& x_t,
                                      const ImageTensor&, const ImageTensor& eps_hat, ImageTensor& grad) {
    const ImageTensor x0_hat = predict_x0(x_t, eps_hat, t, schedule);
    ImageTensor g_x0;
    const double l = masked_loss(x0, masks[index], x0_hat, t, schedule, &g_x0);
    // x0_hat = (x_t - sqrt(1 - abar) eps_hat) / sqrt(abar)
    const auto chain = static_cast<float>(-std::sqrt(1.0 - schedule.alpha_bars[t]) / std::sqrt(schedule.alpha_bars[t]));
    for (std::size_t i = 0; i < grad.size(); ++i) grad.values[i] = g_x0.values[i] * chain;
    return l;
  };
  DiffusionTrainOptions opt{config.iterations, config.batch_size, config.learning_rate, config.grad_clip, config.seed};
  result.loss_trace = detail::train_denoiser(base.spec, result.checkpoint.weights, &learned.embedding, images,
                                             schedule, opt, loss, progress);
  result.checkpoint.token = std::move(learned);
  return result;
}

/// Plain-text "step,loss" CSV with a header row.
inline void write_loss_trace_csv(const std::filesystem::path& path, std::span<const double> trace) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write loss trace " + path.string());
  out.precision(17);
  out << "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << ',' << trace[i] << '\n';
}

inline std::vector<double> read_loss_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read loss trace " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<double> trace;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("loss trace: malformed line '" + line + "'");
    trace.push_back(std::stod(line.substr(comma + 1)));
  }
  return trace;
}

}  // namespace maskdiff
