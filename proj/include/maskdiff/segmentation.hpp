// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/nn/adam.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/tensor.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff {

struct SegConfig {
  int epochs = 20;
  int batch_size = 8;
  int image_size = 64;
  double learning_rate = 1e-3;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double loss_mix = 0.5;  // weight on focal; dice gets 1 - loss_mix
  double dice_smooth = 1.0;
  std::uint64_t seed = 0;
  std::vector<int> channel_widths{32, 64, 128, 256};
  double threshold = 0.5;
  double grad_clip = 1.0;

  void validate() const {
    if (epochs < 1) throw InvalidArgument("SegConfig: epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("SegConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("SegConfig: learning_rate must be positive");
    if (!(loss_mix >= 0.0 && loss_mix <= 1.0)) throw InvalidArgument("SegConfig: loss_mix must be in [0,1]");
    if (!(focal_gamma >= 0.0)) throw InvalidArgument("SegConfig: focal_gamma must be >= 0");
    if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) throw InvalidArgument("SegConfig: focal_alpha must be in [0,1]");
    if (!(dice_smooth >= 0.0)) throw InvalidArgument("SegConfig: dice_smooth must be >= 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("SegConfig: threshold must be in (0,1)");
    if (channel_widths.empty()) throw InvalidArgument("SegConfig: channel_widths must be nonempty");
  }

  DenoiserSpec spec(int channels) const {
    DenoiserSpec s;
    s.levels = static_cast<int>(channel_widths.size());
    s.channel_widths = channel_widths;
    s.conditioning = Conditioning::none;
    s.timestep_embedding_dim = 0;
    s.input_channels = channels;
    s.output_channels = 1;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Loss

/// loss_mix * focal + (1 - loss_mix) * (1 - soft dice) for one image. Focal is
/// averaged over pixels; soft dice is (2 sum(p t) + s) / (sum(p) + sum(t) + s).
/// When `grad` is non-empty it receives dLoss/dpred.
template <typename T>
double focal_dice_loss(std::span<const T> pred, std::span<const std::uint8_t> target, const SegConfig& cfg,
                       std::span<T> grad = {}) {
  if (pred.size() != target.size()) throw ShapeMismatch("focal_dice_loss: prediction and target sizes differ");
  if (!grad.empty() && grad.size() != pred.size()) throw ShapeMismatch("focal_dice_loss: gradient size differs");
  if (pred.empty()) throw InvalidArgument("focal_dice_loss: empty input");
  constexpr double kTiny = 1e-12;
  const double g = cfg.focal_gamma, a = cfg.focal_alpha, mix = cfg.loss_mix, s = cfg.dice_smooth;
  const double n = static_cast<double>(pred.size());
  double focal = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i];
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("focal_dice_loss: prediction outside [0,1]");
    if (target[i]) {
      const double q = 1.0 - p;
      focal += q == 0.0 ? 0.0 : -a * std::pow(q, g) * std::log(std::max(p, kTiny));
      inter += p;
      tsum += 1.0;
    } else {
      focal += p == 0.0 ? 0.0 : -(1.0 - a) * std::pow(p, g) * std::log(std::max(1.0 - p, kTiny));
    }
    psum += p;
  }
  focal /= n;
  const double num = 2.0 * inter + s, den = psum + tsum + s;
  const double dice = den > 0.0 ? num / den : 1.0;
  if (!grad.empty()) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double p = pred[i];
      double dfocal;
      if (target[i]) {
        // d/dp [-a (1-p)^g ln p]
        const double q = 1.0 - p;
        const double lp = std::log(std::max(p, kTiny));
        dfocal = q == 0.0 ? 0.0 : a * (g * std::pow(q, g - 1.0) * lp - std::pow(q, g) / std::max(p, kTiny));
      } else {
        // d/dp [-(1-a) p^g ln(1-p)]
        const double q = std::max(1.0 - p, kTiny);
        dfocal = p == 0.0 ? 0.0 : -(1.0 - a) * (g * std::pow(p, g - 1.0) * std::log(q) - std::pow(p, g) / q);
      }
      const double ddice = den > 0.0 ? ((target[i] ? 2.0 : 0.0) * den - num) / (den * den) : 0.0;
      grad[i] = static_cast<T>(mix * dfocal / n - (1.0 - mix) * ddice);
    }
  }
  return mix * focal + (1.0 - mix) * (1.0 - dice);
}

inline double focal_dice_loss(const ImageTensor& pred_prob, const BinaryMask& target, const SegConfig& cfg,
                              ImageTensor* grad = nullptr) {
  require_aligned(pred_prob, target, "focal_dice_loss");
  if (pred_prob.channels != 1) throw ShapeMismatch("focal_dice_loss: prediction must be single-channel");
  if (grad != nullptr) *grad = ImageTensor(1, pred_prob.height, pred_prob.width);
  return focal_dice_loss<float>(pred_prob.values, target.values, cfg,
                                grad != nullptr ? std::span<float>(grad->values) : std::span<float>());
}

// ---------------------------------------------------------------------------
// Metrics

struct OverlapCounts {
  std::size_t intersection = 0;
  std::size_t pred = 0;
  std::size_t target = 0;
};

inline OverlapCounts overlap(const BinaryMask& pred, const BinaryMask& target) {
  require_same_shape(pred, target, "overlap");
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    c.pred += pred.values[i];
    c.target += target.values[i];
    c.intersection += pred.values[i] & target.values[i];
  }
  return c;
}

/// 2|P and T| / (|P| + |T|); 1 when both are empty.
inline double dice_score(const BinaryMask& pred, const BinaryMask& target) {
  const auto c = overlap(pred, target);
  if (c.pred + c.target == 0) return 1.0;
  return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.pred + c.target);
}

/// |P and T| / |P or T|; 1 when both are empty.
inline double iou_score(const BinaryMask& pred, const BinaryMask& target) {
  const auto c = overlap(pred, target);
  const std::size_t uni = c.pred + c.target - c.intersection;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.intersection) / static_cast<double>(uni);
}

struct SegMetrics {
  double dice = 0.0;
  double iou = 0.0;
  int n_images = 0;
  std::vector<double> per_image_dice;
  std::vector<double> per_image_iou;
};

using MaskPredictor = std::function<BinaryMask(const ImageTensor&)>;

/// Mean per-image Dice and IoU of `predict` over `test`.
inline SegMetrics evaluate(const MaskPredictor& predict, std::span<const ImageMaskPair> test) {
  if (test.empty()) throw EmptyDataset("evaluate: test split is empty");
  SegMetrics m;
  for (const auto& p : test) {
    const BinaryMask pred = predict(p.image);
    m.per_image_dice.push_back(dice_score(pred, p.mask));
    m.per_image_iou.push_back(iou_score(pred, p.mask));
  }
  m.n_images = static_cast<int>(test.size());
  m.dice = std::accumulate(m.per_image_dice.begin(), m.per_image_dice.end(), 0.0) / m.n_images;
  m.iou = std::accumulate(m.per_image_iou.begin(), m.per_image_iou.end(), 0.0) / m.n_images;
  return m;
}

namespace detail {

inline float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

/// Probability maps for a list of images, evaluated in batches.
inline std::vector<ImageTensor> segment_probabilities(const Checkpoint& model, std::span<const ImageMaskPair> pairs,
                                                      int batch = 8) {
  const Denoiser net(model);
  std::vector<ImageTensor> out;
  out.reserve(pairs.size());
  for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(batch));
    std::vector<ImageTensor> xs;
    for (std::size_t i = start; i < end; ++i) xs.push_back(pairs[i].image);
    const std::vector<int> ts(xs.size(), 0);
    for (auto& logits : net.predict(xs, ts, nullptr)) {
      for (auto& v : logits.values) v = sigmoid(v);
      out.push_back(std::move(logits));
    }
  }
  return out;
}

}  // namespace detail

/// Binarizes the segmenter's probabilities at `threshold` (p >= threshold).
inline SegMetrics evaluate(const Checkpoint& model, std::span<const ImageMaskPair> test, double threshold = 0.5) {
  if (test.empty()) throw EmptyDataset("evaluate: test split is empty");
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("evaluate: threshold must be in (0,1)");
  const auto probs = detail::segment_probabilities(model, test);
  std::size_t k = 0;
  return evaluate(
      [&](const ImageTensor&) {
        const ImageTensor& p = probs[k++];
        BinaryMask m(p.height, p.width);
        for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = p.values[i] >= threshold ? 1 : 0;
        return m;
      },
      test);
}

// ---------------------------------------------------------------------------
// Training

struct SegEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
  double val_iou = 0.0;
};

struct SegTrainResult {
  Checkpoint checkpoint;  // weights of the best validation epoch
  SegMetrics best_val;
  int best_epoch = 0;
  std::vector<SegEpoch> trace;
};

using EpochFn = std::function<void(const SegEpoch&)>;

/// Trains a compact U-Net on sigmoid(logits) with the focal + dice loss,
/// scoring the validation split after every epoch and keeping the weights of
/// the first epoch with the highest validation Dice.
inline SegTrainResult train_segmenter(std::span<const ImageMaskPair> train, std::span<const ImageMaskPair> val,
                                      const SegConfig& config, const EpochFn& on_epoch = {}) {
  config.validate();
  if (train.empty()) throw EmptyDataset("train_segmenter: train split is empty");
  if (val.empty()) throw EmptyDataset("train_segmenter: validation split is empty");
  const int channels = train.front().image.channels;
  for (auto split : {train, val}) {
    for (const auto& p : split) {
      if (p.image.height != config.image_size || p.image.width != config.image_size || p.image.channels != channels) {
        throw ShapeMismatch("train_segmenter: pair '" + p.id + "' does not match the configured image size");
      }
      require_aligned(p.image, p.mask, "train_segmenter");
    }
  }
  const DenoiserSpec spec = config.spec(channels);
  Checkpoint current = build_denoiser(spec, derive_seed(config.seed, "init"), {}, "segmenter");
  current.image_size = config.image_size;
  nn::UNet<float> net(spec);
  nn::Adam adam(current.weights.size(), {config.learning_rate});
  AlignedVector<float> grads(current.weights.size());
  nn::UNet<float>::Tape tape;
  Rng rng(derive_seed(config.seed, "shuffle"));

  SegTrainResult result;
  result.best_val.dice = -1.0;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<ImageTensor> xs;
      for (std::size_t i = start; i < end; ++i) xs.push_back(train[order[i]].image);
      const std::vector<int> ts(xs.size(), 0);
      const auto logits = unpack_batch(net.forward(current.weights, pack_batch(xs), ts, nullptr, &tape));
      std::vector<ImageTensor> dlogits;
      double batch_loss = 0.0;
      const double inv_b = 1.0 / static_cast<double>(xs.size());
      for (std::size_t b = 0; b < xs.size(); ++b) {
        ImageTensor prob = logits[b];
        for (auto& v : prob.values) v = detail::sigmoid(v);
        ImageTensor g;
        batch_loss += focal_dice_loss(prob, train[order[start + b]].mask, config, &g);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float p = prob.values[i];
          g.values[i] = static_cast<float>(g.values[i] * p * (1.0f - p) * inv_b);
        }
        dlogits.push_back(std::move(g));
      }
      batch_loss *= inv_b;
      if (!std::isfinite(batch_loss)) {
        throw NonFiniteValue("train_segmenter: non-finite loss in epoch " + std::to_string(epoch));
      }
      loss_sum += batch_loss * static_cast<double>(xs.size());
      std::fill(grads.begin(), grads.end(), 0.0f);
      net.backward(current.weights, tape, pack_batch(dlogits), grads, nullptr);
      nn::clip_grad_norm(grads, config.grad_clip);
      adam.step(current.weights, grads);
    }
    const SegMetrics vm = evaluate(current, val, config.threshold);
    const SegEpoch rec{epoch, loss_sum / static_cast<double>(train.size()), vm.dice, vm.iou};
    result.trace.push_back(rec);
    if (vm.dice > result.best_val.dice) {
      result.best_val = vm;
      result.best_epoch = epoch;
      result.checkpoint = current;
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

/// Thresholded segmenter output for one image.
inline BinaryMask segment(const Checkpoint& model, const ImageTensor& image, double threshold = 0.5) {
  const ImageMaskPair p{"", image, BinaryMask(image.height, image.width), {}};
  const ImageTensor prob = detail::segment_probabilities(model, std::span<const ImageMaskPair>(&p, 1)).front();
  BinaryMask m(prob.height, prob.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = prob.values[i] >= threshold ? 1 : 0;
  return m;
}

}  // namespace maskdiff
