// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "maskdiff/error.hpp"

namespace maskdiff::nn {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction over one flat parameter vector.
class Adam {
 public:
  Adam(std::size_t size, AdamOptions options) : options_(options), m_(size, 0.0f), v_(size, 0.0f) {
    if (!(options.learning_rate > 0.0)) throw InvalidArgument("Adam: learning rate must be positive");
  }

  void step(std::span<float> params, std::span<const float> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) throw ShapeMismatch("Adam: size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(options_.beta1);
    const auto b2 = static_cast<float>(options_.beta2);
    const auto lr = static_cast<float>(options_.learning_rate / c1);
    const auto inv_c2 = static_cast<float>(1.0 / c2);
    const auto eps = static_cast<float>(options_.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const float g = grads[i];
      m_[i] = b1 * m_[i] + (1.0f - b1) * g;
      v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
      params[i] -= lr * m_[i] / (std::sqrt(v_[i] * inv_c2) + eps);
    }
  }

  long steps() const noexcept { return t_; }

 private:
  AdamOptions options_;
  std::vector<float> m_;
  std::vector<float> v_;
  long t_ = 0;
};

/// Scales `grads` in place so its global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::span<float> grads, double max_norm) {
  double sq = 0.0;
  for (float g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (float& g : grads) g *= scale;
  }
  return norm;
}

}  // namespace maskdiff::nn
