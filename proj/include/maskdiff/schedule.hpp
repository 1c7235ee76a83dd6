// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "maskdiff/error.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

enum class ScheduleKind { linear };
enum class WeightMode { uniform, snr };

inline std::string to_string(ScheduleKind) { return "linear"; }
inline std::string to_string(WeightMode m) { return m == WeightMode::uniform ? "uniform" : "snr"; }

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  throw InvalidArgument("unknown schedule kind '" + s + "'");
}
inline WeightMode parse_weight_mode(const std::string& s) {
  if (s == "uniform") return WeightMode::uniform;
  if (s == "snr") return WeightMode::snr;
  throw InvalidArgument("unknown weight mode '" + s + "'");
}

/// The inputs that fully determine a schedule; what checkpoints persist.
struct ScheduleParams {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  ScheduleKind kind = ScheduleKind::linear;
  WeightMode weight_mode = WeightMode::uniform;

  friend bool operator==(const ScheduleParams&, const ScheduleParams&) = default;
};

/// Per-timestep coefficients. Index t runs over [0, steps).
struct NoiseSchedule {
  ScheduleParams params;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> loss_weights;

  int steps() const noexcept { return static_cast<int>(betas.size()); }
};

inline NoiseSchedule make_schedule(const ScheduleParams& p) {
  if (p.steps < 1) throw InvalidArgument("make_schedule: step count must be >= 1");
  if (!(p.beta_start > 0.0) || !(p.beta_start <= p.beta_end) || !(p.beta_end < 1.0)) {
    throw InvalidArgument("make_schedule: require 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.params = p;
  const auto n = static_cast<std::size_t>(p.steps);
  s.betas.resize(n);
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  s.loss_weights.resize(n);
  double running = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(n - 1);
    s.betas[t] = p.beta_start + (p.beta_end - p.beta_start) * frac;
    s.alphas[t] = 1.0 - s.betas[t];
    running *= s.alphas[t];
    s.alpha_bars[t] = running;
    s.loss_weights[t] =
        p.weight_mode == WeightMode::uniform ? 1.0 : s.alpha_bars[t] / (1.0 - s.alpha_bars[t]);
  }
  return s;
}

inline NoiseSchedule make_schedule(int steps, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::linear,
                                   WeightMode weight_mode = WeightMode::uniform) {
  return make_schedule(ScheduleParams{steps, beta_start, beta_end, kind, weight_mode});
}

namespace detail {
inline void check_step(const NoiseSchedule& s, int t, const char* what) {
  if (t < 0 || t >= s.steps()) {
    throw IndexOutOfRange(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " +
                          std::to_string(s.steps()) + ")");
  }
}
}  // namespace detail

/// Forward process: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
inline ImageTensor q_sample(const ImageTensor& x0, int t, const ImageTensor& eps, const NoiseSchedule& s) {
  require_same_shape(x0, eps, "q_sample");
  detail::check_step(s, t, "q_sample");
  const double signal = std::sqrt(s.alpha_bars[t]);
  const double noise = std::sqrt(1.0 - s.alpha_bars[t]);
  ImageTensor out = x0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = static_cast<float>(signal * x0.values[i] + noise * eps.values[i]);
  }
  return out;
}

/// Reverse step x_t -> x_{t-1} using the posterior mean
///   (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t),
/// plus sqrt(beta_t) * noise when noise is supplied and t > 0.
inline ImageTensor ddpm_step(const ImageTensor& x_t, const ImageTensor& eps_hat, int t, const NoiseSchedule& s,
                             const ImageTensor* noise = nullptr) {
  require_same_shape(x_t, eps_hat, "ddpm_step");
  detail::check_step(s, t, "ddpm_step");
  if (noise != nullptr) require_same_shape(x_t, *noise, "ddpm_step noise");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alphas[t]);
  const double eps_coef = s.betas[t] / std::sqrt(1.0 - s.alpha_bars[t]);
  const bool add_noise = noise != nullptr && t > 0;
  const double sigma = std::sqrt(s.betas[t]);
  ImageTensor out = x_t;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = (x_t.values[i] - eps_coef * eps_hat.values[i]) * inv_sqrt_alpha;
    if (add_noise) v += sigma * noise->values[i];
    out.values[i] = static_cast<float>(v);
  }
  return out;
}

/// Image estimate recovered from an epsilon prediction.
inline ImageTensor predict_x0(const ImageTensor& x_t, const ImageTensor& eps_hat, int t, const NoiseSchedule& s) {
  require_same_shape(x_t, eps_hat, "predict_x0");
  detail::check_step(s, t, "predict_x0");
  const double inv_signal = 1.0 / std::sqrt(s.alpha_bars[t]);
  const double noise = std::sqrt(1.0 - s.alpha_bars[t]);
  ImageTensor out = x_t;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = static_cast<float>((x_t.values[i] - noise * eps_hat.values[i]) * inv_signal);
  }
  return out;
}

}  // namespace maskdiff
