// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/image_io.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/tensor.hpp"
#include "maskdiff/token.hpp"

namespace maskdiff {

/// Everything one guided run needs. `model` must outlive the run. When `token`
/// is empty the checkpoint's own learned token is used.
struct GuidanceRequest {
  ImageTensor background;
  BinaryMask mask;
  const Checkpoint* model = nullptr;
  std::optional<TriggerToken> token;
  std::uint64_t seed = 0;
  bool stochastic = true;
};

struct SamplerState {
  int t = 0;
  const ImageTensor* x_t = nullptr;
  const ImageTensor* x_prev_source = nullptr;
};

/// Observer invoked after each reverse step with the request index.
using SamplerObserver = std::function<void(std::size_t, const SamplerState&)>;

/// Background content for the unmasked region at step t: the background
/// noised to t, or the background itself for t = -1.
inline ImageTensor preserve_background(const ImageTensor& background, int t, const NoiseSchedule& schedule,
                                       const ImageTensor& eps) {
  require_same_shape(background, eps, "preserve_background");
  if (t == -1) return background;
  return q_sample(background, t, eps, schedule);
}

/// mask * ddpm_step(x_t, eps_hat, t) + (1 - mask) * preserved.
inline ImageTensor blend_step(const ImageTensor& x_t, const ImageTensor& eps_hat, const BinaryMask& mask,
                              const ImageTensor& preserved, int t, const NoiseSchedule& schedule,
                              const ImageTensor* noise = nullptr) {
  require_same_shape(x_t, preserved, "blend_step");
  require_aligned(x_t, mask, "blend_step");
  ImageTensor out = ddpm_step(x_t, eps_hat, t, schedule, noise);
  const std::size_t plane = out.plane_size();
  for (int c = 0; c < out.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask.values[i] == 0) out.values[c * plane + i] = preserved.values[c * plane + i];
    }
  }
  return out;
}

/// Exact background outside the mask, `generated` inside.
inline ImageTensor composite(const ImageTensor& generated, const BinaryMask& mask, const ImageTensor& background) {
  require_same_shape(generated, background, "composite");
  require_aligned(generated, mask, "composite");
  ImageTensor out = background;
  const std::size_t plane = out.plane_size();
  for (int c = 0; c < out.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask.values[i] != 0) out.values[c * plane + i] = generated.values[c * plane + i];
    }
  }
  return out;
}

namespace detail {

inline const std::vector<float>* resolve_condition(const GuidanceRequest& r) {
  const Checkpoint& m = *r.model;
  if (m.spec.conditioning == Conditioning::none) {
    if (r.token) throw InvalidArgument("generate: model is unconditioned but a token was supplied");
    return nullptr;
  }
  const TriggerToken* tok = r.token ? &*r.token : (m.token ? &*m.token : nullptr);
  if (tok == nullptr) throw InvalidArgument("generate: model expects a trigger token");
  if (static_cast<int>(tok->embedding.size()) != m.spec.timestep_embedding_dim) {
    throw ShapeMismatch("generate: token embedding dimension does not match the model");
  }
  return &tok->embedding;
}

}  // namespace detail

/// Runs several requests against one checkpoint, batching the denoiser
/// evaluations. Each request draws from its own seeded stream: x_T first, then
/// one noise tensor per step shared by the stochastic term and the background
/// preservation. Outputs depend only on the request list.
inline std::vector<ImageMaskPair> generate_batch(std::span<const GuidanceRequest> requests,
                                                 const NoiseSchedule& schedule,
                                                 const SamplerObserver& observer = {}) {
  if (requests.empty()) return {};
  const Checkpoint* model = requests.front().model;
  if (model == nullptr) throw InvalidArgument("generate: request has no model");
  std::vector<const std::vector<float>*> conds;
  for (const auto& r : requests) {
    if (r.model != model) throw InvalidArgument("generate_batch: all requests must share one model");
    require_aligned(r.background, r.mask, "generate");
    require_same_shape(r.background, requests.front().background, "generate_batch");
    if (r.background.channels != model->spec.input_channels) {
      throw ShapeMismatch("generate: background channels do not match the model");
    }
    conds.push_back(detail::resolve_condition(r));
  }
  for (const auto* c : conds) {
    if (c != nullptr && conds.front() != nullptr && *c != *conds.front()) {
      throw InvalidArgument("generate_batch: all requests must share one token");
    }
  }
  const Denoiser denoiser(*model);
  const std::size_t n = requests.size();
  const auto& shape = requests.front().background;
  std::vector<Rng> rngs;
  std::vector<ImageTensor> xs;
  for (const auto& r : requests) {
    rngs.emplace_back(r.seed);
    xs.push_back(gaussian_like(rngs.back(), shape.channels, shape.height, shape.width));
  }
  std::vector<int> ts(n);
  for (int t = schedule.steps() - 1; t >= 0; --t) {
    std::fill(ts.begin(), ts.end(), t);
    const auto eps_hat = denoiser.predict(xs, ts, conds.front());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = requests[i];
      const ImageTensor noise = gaussian_like(rngs[i], shape.channels, shape.height, shape.width);
      const ImageTensor preserved = preserve_background(r.background, t - 1, schedule, noise);
      xs[i] = blend_step(xs[i], eps_hat[i], r.mask, preserved, t, schedule, r.stochastic ? &noise : nullptr);
      if (!xs[i].all_finite()) {
        throw NonFiniteValue("generate: non-finite latent at step " + std::to_string(t) + " (seed " +
                             std::to_string(r.seed) + ")");
      }
      if (observer) observer(i, SamplerState{t, &xs[i], &preserved});
    }
  }
  std::vector<ImageMaskPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = requests[i];
    ImageMaskPair p;
    p.image = composite(xs[i], r.mask, r.background);
    p.mask = r.mask;
    p.meta["seed"] = std::to_string(r.seed);
    p.meta["model_id"] = model->model_id;
    out.push_back(std::move(p));
  }
  return out;
}

inline ImageMaskPair generate(const GuidanceRequest& request, const NoiseSchedule& schedule,
                              const SamplerObserver& observer = {}) {
  return std::move(generate_batch(std::span<const GuidanceRequest>(&request, 1), schedule, observer).front());
}

/// Paints healthy tissue into `mask` using a model fine-tuned on inverted masks.
inline ImageTensor repair_to_healthy(const ImageTensor& lesion_image, const BinaryMask& mask,
                                     const Checkpoint& background_model, const std::optional<TriggerToken>& token,
                                     std::uint64_t seed, const NoiseSchedule& schedule, bool stochastic = true) {
  GuidanceRequest r{lesion_image, mask, &background_model, token, seed, stochastic};
  return generate(r, schedule).image;
}

// ---------------------------------------------------------------------------
// On-disk form: <dir>/images/<id>.png, <dir>/masks/<id>.png and one JSON line
// per pair in <dir>/pairs.jsonl.

struct GeneratedRecord {
  std::string pair_id;
  std::uint64_t seed = 0;
  std::string model_id;
  std::string mask_id;
  std::string background_id;
};

inline nlohmann::json to_json(const GeneratedRecord& r) {
  return {{"pair_id", r.pair_id},
          {"seed", r.seed},
          {"model_id", r.model_id},
          {"mask_id", r.mask_id},
          {"background_id", r.background_id}};
}

inline GeneratedRecord record_from_json(const nlohmann::json& j) {
  return {j.at("pair_id").get<std::string>(), j.at("seed").get<std::uint64_t>(), j.at("model_id").get<std::string>(),
          j.at("mask_id").get<std::string>(), j.at("background_id").get<std::string>()};
}

inline GeneratedRecord record_of(const ImageMaskPair& p) {
  auto get = [&](const char* k) {
    auto it = p.meta.find(k);
    return it == p.meta.end() ? std::string() : it->second;
  };
  const std::string seed = get("seed");
  return {p.id, seed.empty() ? 0 : std::stoull(seed), get("model_id"), get("mask_id"), get("background_id")};
}

inline void write_pairs(const std::filesystem::path& dir, std::span<const ImageMaskPair> pairs,
                        const std::string& manifest_name = "pairs.jsonl") {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream manifest(dir / manifest_name);
  if (!manifest) throw IoError("cannot write " + (dir / manifest_name).string());
  for (const auto& p : pairs) {
    if (p.id.empty()) throw InvalidArgument("write_pairs: pair without id");
    save_image(dir / "images" / (p.id + ".png"), p.image);
    save_mask(dir / "masks" / (p.id + ".png"), p.mask);
    manifest << to_json(record_of(p)).dump() << '\n';
  }
}

inline std::vector<ImageMaskPair> read_pairs(const std::filesystem::path& dir,
                                             const std::string& manifest_name = "pairs.jsonl") {
  std::ifstream in(dir / manifest_name);
  if (!in) throw IoError("cannot read " + (dir / manifest_name).string());
  std::vector<ImageMaskPair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const GeneratedRecord r = record_from_json(nlohmann::json::parse(line));
    ImageMaskPair p;
    p.id = r.pair_id;
    p.image = load_image(dir / "images" / (r.pair_id + ".png"));
    p.mask = load_mask(dir / "masks" / (r.pair_id + ".png"));
    p.meta = {{"seed", std::to_string(r.seed)},
              {"model_id", r.model_id},
              {"mask_id", r.mask_id},
              {"background_id", r.background_id}};
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace maskdiff
