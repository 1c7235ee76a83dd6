// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/curation.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/finetune.hpp"
#include "maskdiff/mask_generator.hpp"
#include "maskdiff/segmentation.hpp"

namespace maskdiff {

enum class Profile { toy, full };

inline std::string to_string(Profile p) { return p == Profile::toy ? "toy" : "full"; }
inline Profile parse_profile(const std::string& s) {
  if (s == "toy") return Profile::toy;
  if (s == "full") return Profile::full;
  throw InvalidArgument("unknown profile '" + s + "'");
}

/// Where the pairs come from: a synthetic toy set (fully described by its
/// parameters) or a directory in the paired_dirs layout.
struct DatasetSource {
  std::string kind = "toy";  // "toy" or "paired_dirs"
  std::uint64_t seed = 0;    // toy synthesis and split seed
  int n = 50;
  int backgrounds = 50;
  int image_size = 64;
  std::string root;  // paired_dirs only
  int resize_to = 0;
  int channels = 0;
};

struct GuidanceSettings {
  int n_masks = 50;         // guiding masks sampled from the mask model
  int n_backgrounds = 50;   // distinct backgrounds to paint on
  int n_generated = 150;    // pairs wanted after filtering
  int max_candidates = 300; // generation budget
  int batch = 4;            // requests per denoiser batch
  bool stochastic = true;
  int finetune_pairs = 30;  // lesion/background models see at most this many train pairs
  std::string token_text = "zkx";
};

struct CurationSettings {
  double lo = 0.5;
  double hi = 0.95;
  int grid = 8;
  ErosionSettings erosion;
};

struct PipelineConfig {
  Profile profile = Profile::toy;
  std::uint64_t seed = 0;
  DatasetSource dataset;
  DenoiserSpec lesion_spec;
  FinetuneConfig finetune;  // shared by the lesion and background models
  MaskModelConfig mask_model;
  MaskSamplingOptions mask_sampling;
  GuidanceSettings guidance;
  CurationSettings curation;
  SegConfig seg;

  void validate() const {
    lesion_spec.validate();
    if (lesion_spec.conditioning != Conditioning::trigger_token) {
      throw InvalidArgument("PipelineConfig: the lesion model must use trigger-token conditioning");
    }
    finetune.validate();
    mask_model.validate();
    seg.validate();
    validate_token_text(guidance.token_text);
    if (guidance.n_generated < 1) throw InvalidArgument("PipelineConfig: n_generated must be >= 1");
    if (guidance.n_masks < 1 || guidance.n_backgrounds < 1) {
      throw InvalidArgument("PipelineConfig: n_masks and n_backgrounds must be >= 1");
    }
    if (guidance.max_candidates < guidance.n_generated) {
      throw InvalidArgument("PipelineConfig: max_candidates must be >= n_generated");
    }
    if (guidance.batch < 1 || guidance.finetune_pairs < 1) {
      throw InvalidArgument("PipelineConfig: batch and finetune_pairs must be >= 1");
    }
    if (!(curation.lo >= -1.0 && curation.lo < curation.hi && curation.hi <= 1.0)) {
      throw InvalidArgument("PipelineConfig: need -1 <= lo < hi <= 1");
    }
    if (curation.erosion.radius < 1 || curation.erosion.iterations < 1) {
      throw InvalidArgument("PipelineConfig: erosion radius and iterations must be >= 1");
    }
    if (seg.image_size != finetune.image_size) {
      throw InvalidArgument("PipelineConfig: segmenter and generator image sizes differ");
    }
    if (finetune.image_size % lesion_spec.size_multiple() != 0) {
      throw InvalidArgument("PipelineConfig: image size is not divisible by the lesion model's stride");
    }
    if (finetune.image_size % mask_model.image_size != 0) {
      throw InvalidArgument("PipelineConfig: image size must be a multiple of the mask resolution");
    }
  }
};

/// 64x64 images, T = 200, 30 fine-tune pairs, 2000 iterations, 50 guiding
/// masks, 150 kept pairs, 20 segmenter epochs.
inline PipelineConfig toy_config(std::uint64_t seed = 0) {
  PipelineConfig c;
  c.profile = Profile::toy;
  c.seed = seed;
  c.dataset.seed = seed;
  c.lesion_spec.levels = 3;
  c.lesion_spec.channel_widths = {16, 32, 64};
  c.lesion_spec.conditioning = Conditioning::trigger_token;
  c.lesion_spec.timestep_embedding_dim = 64;
  c.finetune = FinetuneConfig{};
  c.mask_model = MaskModelConfig{};
  // Mask sampling dominates the toy runtime; half the steps keeps 3 seeds
  // under the time budget. beta_end doubles so alpha_bar_T stays comparable.
  c.mask_model.schedule = ScheduleParams{100, 1e-4, 0.04};
  c.seg = SegConfig{};
  return c;
}

/// Full-scale counts; needs a real dataset and far more compute.
inline PipelineConfig full_config(std::uint64_t seed = 0) {
  PipelineConfig c;
  c.profile = Profile::full;
  c.seed = seed;
  c.dataset.kind = "paired_dirs";
  c.dataset.resize_to = 256;
  c.dataset.image_size = 256;
  c.lesion_spec = DenoiserSpec{};
  c.lesion_spec.conditioning = Conditioning::trigger_token;
  c.finetune.image_size = 256;
  c.finetune.schedule = ScheduleParams{1000, 1e-4, 0.02};
  c.mask_model.image_size = 64;
  c.mask_model.iterations = 5000;
  c.mask_model.schedule = ScheduleParams{1000, 1e-4, 0.02};
  c.guidance.n_backgrounds = 50;
  c.guidance.n_generated = 1500;
  c.guidance.max_candidates = 3000;
  c.guidance.batch = 8;
  c.seg.image_size = 256;
  c.seg.epochs = 800;
  return c;
}

/// Minutes-to-seconds variant used by the test suite; same stage graph as toy.
inline PipelineConfig smoke_config(std::uint64_t seed = 0) {
  PipelineConfig c = toy_config(seed);
  c.dataset.n = 20;
  c.dataset.backgrounds = 4;
  c.dataset.image_size = 32;
  c.lesion_spec.channel_widths = {8, 16, 16};
  c.finetune.iterations = 20;
  c.finetune.image_size = 32;
  c.finetune.schedule = ScheduleParams{10, 1e-4, 0.2};
  c.mask_model.image_size = 8;
  c.mask_model.iterations = 4;
  c.mask_model.batch_size = 2;
  c.mask_model.schedule = ScheduleParams{10, 1e-4, 0.2};
  c.mask_sampling.min_area = 0.0;
  c.mask_sampling.max_area = 1.0;
  c.mask_sampling.batch = 4;
  c.guidance.n_masks = 4;
  c.guidance.n_backgrounds = 4;
  c.guidance.n_generated = 6;
  c.guidance.max_candidates = 24;
  c.guidance.finetune_pairs = 8;
  c.curation.lo = -1.0;
  c.curation.hi = 0.999;
  c.seg.epochs = 2;
  c.seg.image_size = 32;
  c.seg.channel_widths = {8, 16};
  return c;
}

inline PipelineConfig preset_config(const std::string& name, std::uint64_t seed = 0) {
  if (name == "toy") return toy_config(seed);
  if (name == "full") return full_config(seed);
  if (name == "smoke") return smoke_config(seed);
  throw InvalidArgument("unknown preset '" + name + "' (expected toy, full or smoke)");
}

// ---------------------------------------------------------------------------
// JSON. Missing keys keep the values of the base config, so partial files
// override a preset.

inline nlohmann::json to_json(const PipelineConfig& c) {
  using nlohmann::json;
  const auto& d = c.dataset;
  const auto& f = c.finetune;
  const auto& m = c.mask_model;
  const auto& s = c.seg;
  return json{
      {"profile", to_string(c.profile)},
      {"seed", c.seed},
      {"dataset",
       {{"kind", d.kind},
        {"seed", d.seed},
        {"n", d.n},
        {"backgrounds", d.backgrounds},
        {"image_size", d.image_size},
        {"root", d.root},
        {"resize_to", d.resize_to},
        {"channels", d.channels}}},
      {"lesion_spec", spec_to_json(c.lesion_spec)},
      {"finetune",
       {{"iterations", f.iterations},
        {"batch_size", f.batch_size},
        {"learning_rate", f.learning_rate},
        {"image_size", f.image_size},
        {"grad_clip", f.grad_clip},
        {"schedule", schedule_to_json(f.schedule)}}},
      {"mask_model",
       {{"spec", spec_to_json(m.spec)},
        {"iterations", m.iterations},
        {"batch_size", m.batch_size},
        {"learning_rate", m.learning_rate},
        {"image_size", m.image_size},
        {"grad_clip", m.grad_clip},
        {"schedule", schedule_to_json(m.schedule)}}},
      {"mask_sampling",
       {{"threshold", c.mask_sampling.threshold},
        {"min_area", c.mask_sampling.min_area},
        {"max_area", c.mask_sampling.max_area},
        {"batch", c.mask_sampling.batch},
        {"stochastic", c.mask_sampling.stochastic}}},
      {"guidance",
       {{"n_masks", c.guidance.n_masks},
        {"n_backgrounds", c.guidance.n_backgrounds},
        {"n_generated", c.guidance.n_generated},
        {"max_candidates", c.guidance.max_candidates},
        {"batch", c.guidance.batch},
        {"stochastic", c.guidance.stochastic},
        {"finetune_pairs", c.guidance.finetune_pairs},
        {"token_text", c.guidance.token_text}}},
      {"curation",
       {{"lo", c.curation.lo},
        {"hi", c.curation.hi},
        {"grid", c.curation.grid},
        {"erosion_radius", c.curation.erosion.radius},
        {"erosion_iterations", c.curation.erosion.iterations}}},
      {"seg",
       {{"epochs", s.epochs},
        {"batch_size", s.batch_size},
        {"image_size", s.image_size},
        {"learning_rate", s.learning_rate},
        {"focal_gamma", s.focal_gamma},
        {"focal_alpha", s.focal_alpha},
        {"loss_mix", s.loss_mix},
        {"dice_smooth", s.dice_smooth},
        {"channel_widths", s.channel_widths},
        {"threshold", s.threshold},
        {"grad_clip", s.grad_clip}}}};
}

namespace detail {
template <typename U>
void read_opt(const nlohmann::json& j, const char* key, U& out) {
  if (j.contains(key)) out = j.at(key).get<U>();
}
}  // namespace detail

inline PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig c) {
  using detail::read_opt;
  if (j.contains("profile")) c.profile = parse_profile(j.at("profile").get<std::string>());
  read_opt(j, "seed", c.seed);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    read_opt(d, "kind", c.dataset.kind);
    read_opt(d, "seed", c.dataset.seed);
    read_opt(d, "n", c.dataset.n);
    read_opt(d, "backgrounds", c.dataset.backgrounds);
    read_opt(d, "image_size", c.dataset.image_size);
    read_opt(d, "root", c.dataset.root);
    read_opt(d, "resize_to", c.dataset.resize_to);
    read_opt(d, "channels", c.dataset.channels);
  }
  if (j.contains("lesion_spec")) c.lesion_spec = spec_from_json(j.at("lesion_spec"));
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    read_opt(f, "iterations", c.finetune.iterations);
    read_opt(f, "batch_size", c.finetune.batch_size);
    read_opt(f, "learning_rate", c.finetune.learning_rate);
    read_opt(f, "image_size", c.finetune.image_size);
    read_opt(f, "grad_clip", c.finetune.grad_clip);
    if (f.contains("schedule")) c.finetune.schedule = schedule_from_json(f.at("schedule"));
  }
  if (j.contains("mask_model")) {
    const auto& m = j.at("mask_model");
    if (m.contains("spec")) c.mask_model.spec = spec_from_json(m.at("spec"));
    read_opt(m, "iterations", c.mask_model.iterations);
    read_opt(m, "batch_size", c.mask_model.batch_size);
    read_opt(m, "learning_rate", c.mask_model.learning_rate);
    read_opt(m, "image_size", c.mask_model.image_size);
    read_opt(m, "grad_clip", c.mask_model.grad_clip);
    if (m.contains("schedule")) c.mask_model.schedule = schedule_from_json(m.at("schedule"));
  }
  if (j.contains("mask_sampling")) {
    const auto& m = j.at("mask_sampling");
    read_opt(m, "threshold", c.mask_sampling.threshold);
    read_opt(m, "min_area", c.mask_sampling.min_area);
    read_opt(m, "max_area", c.mask_sampling.max_area);
    read_opt(m, "batch", c.mask_sampling.batch);
    read_opt(m, "stochastic", c.mask_sampling.stochastic);
  }
  if (j.contains("guidance")) {
    const auto& g = j.at("guidance");
    read_opt(g, "n_masks", c.guidance.n_masks);
    read_opt(g, "n_backgrounds", c.guidance.n_backgrounds);
    read_opt(g, "n_generated", c.guidance.n_generated);
    read_opt(g, "max_candidates", c.guidance.max_candidates);
    read_opt(g, "batch", c.guidance.batch);
    read_opt(g, "stochastic", c.guidance.stochastic);
    read_opt(g, "finetune_pairs", c.guidance.finetune_pairs);
    read_opt(g, "token_text", c.guidance.token_text);
  }
  if (j.contains("curation")) {
    const auto& q = j.at("curation");
    read_opt(q, "lo", c.curation.lo);
    read_opt(q, "hi", c.curation.hi);
    read_opt(q, "grid", c.curation.grid);
    read_opt(q, "erosion_radius", c.curation.erosion.radius);
    read_opt(q, "erosion_iterations", c.curation.erosion.iterations);
  }
  if (j.contains("seg")) {
    const auto& s = j.at("seg");
    read_opt(s, "epochs", c.seg.epochs);
    read_opt(s, "batch_size", c.seg.batch_size);
    read_opt(s, "image_size", c.seg.image_size);
    read_opt(s, "learning_rate", c.seg.learning_rate);
    read_opt(s, "focal_gamma", c.seg.focal_gamma);
    read_opt(s, "focal_alpha", c.seg.focal_alpha);
    read_opt(s, "loss_mix", c.seg.loss_mix);
    read_opt(s, "dice_smooth", c.seg.dice_smooth);
    read_opt(s, "channel_widths", c.seg.channel_widths);
    read_opt(s, "threshold", c.seg.threshold);
    read_opt(s, "grad_clip", c.seg.grad_clip);
  }
  return c;
}

/// A config file may name a preset ("preset": "toy") and override any field.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  const std::string preset = j.value("preset", std::string("toy"));
  const std::uint64_t seed = j.value("seed", std::uint64_t{0});
  return config_from_json(j, preset_config(preset, seed));
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  PipelineConfig c = config_from_json(j);
  c.validate();
  return c;
}

inline void save_config(const PipelineConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config " + path.string());
  out << to_json(c).dump(2) << '\n';
}

/// Builds (toy) or ingests (paired_dirs) the dataset a config points at.
inline Dataset load_dataset(const DatasetSource& src) {
  if (src.kind == "toy") {
    ToyDatasetOptions opt;
    opt.image_size = src.image_size;
    opt.backgrounds = src.backgrounds;
    return synth_toy_dataset(src.seed, src.n, opt);
  }
  if (src.kind == "paired_dirs") {
    IngestOptions opt;
    opt.split_seed = src.seed;
    opt.resize_to = src.resize_to;
    opt.channels = src.channels;
    return ingest_dataset(src.root, opt);
  }
  throw InvalidArgument("unknown dataset kind '" + src.kind + "'");
}

}  // namespace maskdiff
