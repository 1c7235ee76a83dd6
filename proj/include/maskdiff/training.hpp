// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/nn/adam.hpp"
#include "maskdiff/nn/unet.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

/// Called after every optimizer step with (step, batch loss).
using ProgressFn = std::function<void(int, double)>;

struct DiffusionTrainOptions {
  int iterations = 1;
  int batch_size = 1;
  double learning_rate = 1e-4;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

namespace detail {

/// Per-sample loss callback: receives the dataset index, timestep, clean
/// image, noised image, true noise and predicted noise; writes dLoss/dEpsHat
/// into `grad` (pre-shaped, zeroed) and returns the sample loss.
using SampleLoss = std::function<double(std::size_t index, int t, const ImageTensor& x0, const ImageTensor& x_t,
                                        const ImageTensor& eps, const ImageTensor& eps_hat, ImageTensor& grad)>;

/// Shared epsilon-prediction training loop. Each step draws a batch of
/// (index, t, eps) from the seeded stream, forms x_t by q_sample, and descends
/// the batch-mean of `loss`. Updates `weights` (and `token` when non-null) in
/// place and returns the per-step loss trace.
inline std::vector<double> train_denoiser(const DenoiserSpec& spec, AlignedVector<float>& weights,
                                          std::vector<float>* token, std::span<const ImageTensor> images,
                                          const NoiseSchedule& schedule, const DiffusionTrainOptions& opt,
                                          const SampleLoss& loss, const ProgressFn& progress) {
  if (images.empty()) throw EmptyDataset("training set is empty");
  nn::UNet<float> net(spec);
  nn::Adam adam(weights.size(), {opt.learning_rate});
  std::optional<nn::Adam> token_adam;
  if (token != nullptr) token_adam.emplace(token->size(), nn::AdamOptions{opt.learning_rate});

  Rng rng(opt.seed);
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::uniform_int_distribution<int> pick_t(0, schedule.steps() - 1);
  AlignedVector<float> grads(weights.size());
  std::vector<float> token_grad(token != nullptr ? token->size() : 0);
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(opt.iterations));

  const auto B = static_cast<std::size_t>(opt.batch_size);
  std::vector<std::size_t> idx(B);
  std::vector<int> ts(B);
  std::vector<ImageTensor> eps(B);
  std::vector<ImageTensor> noised(B);
  nn::UNet<float>::Tape tape;

  for (int step = 0; step < opt.iterations; ++step) {
    for (std::size_t b = 0; b < B; ++b) {
      idx[b] = pick(rng);
      ts[b] = pick_t(rng);
      const ImageTensor& x0 = images[idx[b]];
      eps[b] = gaussian_like(rng, x0.channels, x0.height, x0.width);
      noised[b] = q_sample(x0, ts[b], eps[b], schedule);
    }
    const nn::Activation<float> x = pack_batch(noised);
    const auto y = net.forward(weights, x, ts, token ? token->data() : nullptr, &tape);
    const auto eps_hat = unpack_batch(y);

    std::vector<ImageTensor> sample_grads;
    sample_grads.reserve(B);
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      ImageTensor g(eps_hat[b].channels, eps_hat[b].height, eps_hat[b].width);
      batch_loss += loss(idx[b], ts[b], images[idx[b]], noised[b], eps[b], eps_hat[b], g);
      sample_grads.push_back(std::move(g));
    }
    batch_loss /= static_cast<double>(B);
    if (!std::isfinite(batch_loss)) {
      throw NonFiniteValue("training diverged: non-finite loss at step " + std::to_string(step));
    }
    trace.push_back(batch_loss);

    nn::Activation<float> dy = pack_batch(sample_grads);
    const float inv_b = 1.0f / static_cast<float>(B);
    for (auto& v : dy.data) v *= inv_b;
    std::fill(grads.begin(), grads.end(), 0.0f);
    std::fill(token_grad.begin(), token_grad.end(), 0.0f);
    net.backward(weights, tape, dy, grads, token ? token_grad.data() : nullptr);
    nn::clip_grad_norm(grads, opt.grad_clip);
    adam.step(weights, grads);
    if (token_adam) {
      nn::clip_grad_norm(token_grad, opt.grad_clip);
      token_adam->step(*token, token_grad);
    }
    if (progress) progress(step, batch_loss);
  }
  return trace;
}

}  // namespace detail
}  // namespace maskdiff
