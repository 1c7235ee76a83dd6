// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/config.hpp"
#include "maskdiff/curation.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/finetune.hpp"
#include "maskdiff/hash.hpp"
#include "maskdiff/logging.hpp"
#include "maskdiff/manifest.hpp"
#include "maskdiff/mask_generator.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/segmentation.hpp"

namespace maskdiff {

inline constexpr const char* kStageNames[] = {"finetune_lesion", "finetune_background", "mask_synthesis",
                                              "backgrounds",     "generation",          "curation",
                                              "segmentation",    "evaluation",          "report"};

/// Carries the partial manifest (and the quality report when filtering left
/// nothing to train on) of an aborted run.
class PipelineError : public Error {
 public:
  PipelineError(const std::string& what, RunManifest manifest, std::optional<QualityReport> quality = std::nullopt)
      : Error(what), manifest_(std::move(manifest)), quality_(std::move(quality)) {}
  const RunManifest& manifest() const noexcept { return manifest_; }
  const std::optional<QualityReport>& quality_report() const noexcept { return quality_; }

 private:
  RunManifest manifest_;
  std::optional<QualityReport> quality_;
};

/// Named per-stage streams expanded from the root seed.
inline std::map<std::string, std::uint64_t> stage_seeds(std::uint64_t root) {
  std::map<std::string, std::uint64_t> s;
  for (const char* name : kStageNames) s[name] = derive_seed(root, name);
  return s;
}

// ---------------------------------------------------------------------------
// Stage building blocks (also used by the CLI verbs)

/// Up to k train pairs in a seeded order.
inline std::vector<ImageMaskPair> select_pairs(std::span<const ImageMaskPair> pairs, std::size_t k,
                                               std::uint64_t seed) {
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::vector<ImageMaskPair> out;
  for (auto i : idx) out.push_back(pairs[i]);
  return out;
}

/// Fresh conditioned denoiser + token, fine-tuned on `pairs`.
inline FinetuneResult train_conditioned_model(std::span<const ImageMaskPair> pairs, const PipelineConfig& cfg,
                                              MaskMode mode, std::uint64_t seed, const ProgressFn& progress = {}) {
  FinetuneConfig fc = cfg.finetune;
  fc.mask_mode = mode;
  fc.seed = derive_seed(seed, "train");
  DenoiserSpec spec = cfg.lesion_spec;
  spec.input_channels = spec.output_channels = pairs.empty() ? 1 : pairs.front().image.channels;
  const Checkpoint base = build_denoiser(spec, derive_seed(seed, "init"), fc.schedule);
  const TriggerToken token =
      make_trigger_token(cfg.guidance.token_text, spec.timestep_embedding_dim, derive_seed(seed, "token"));
  return finetune(pairs, base, token, fc, progress);
}

/// Train masks at the mask model's resolution, with their three flips.
inline std::vector<BinaryMask> mask_training_set(std::span<const ImageMaskPair> pairs, int size) {
  std::vector<BinaryMask> out;
  for (const auto& p : pairs) {
    const BinaryMask m = resize_nearest(p.mask, size, size);
    out.push_back(m);
    out.push_back(flip_horizontal(m));
    out.push_back(flip_vertical(m));
    out.push_back(flip_vertical(flip_horizontal(m)));
  }
  return out;
}

struct GuidingMask {
  std::string id;
  BinaryMask mask;  // at the image resolution
};

/// Mask for candidate k: guiding mask k mod n, flipped by variant (k div n) mod 4.
inline GuidingMask candidate_mask(std::span<const GuidingMask> masks, std::size_t k) {
  const auto& g = masks[k % masks.size()];
  const std::size_t variant = (k / masks.size()) % 4;
  static const char* kSuffix[] = {"", "+flip_h", "+flip_v", "+flip_hv"};
  BinaryMask m = g.mask;
  if (variant == 1 || variant == 3) m = flip_horizontal(m);
  if (variant == 2 || variant == 3) m = flip_vertical(m);
  return {g.id + kSuffix[variant], std::move(m)};
}

using CandidateFilter = std::function<bool(const ImageMaskPair&)>;

/// Generates candidates k = 0, 1, ... in batches until `wanted` of them pass
/// `accept` (all pass when it is empty) or `max_candidates` are drawn.
/// Candidate k uses seed derive_seed(seed, k) and a background chosen by the
/// same stream. Images are snapped to the 8-bit grid before `accept` sees
/// them, so what is filtered and trained on is exactly what is written.
/// Replays must keep `g.batch`: GEMM blocking depends on the batch width.
inline std::vector<ImageMaskPair> generate_candidates(const Checkpoint& model, std::span<const GuidingMask> masks,
                                                      std::span<const NamedImage> backgrounds,
                                                      const GuidanceSettings& g, std::uint64_t seed,
                                                      const CandidateFilter& accept = {},
                                                      const std::function<void(std::size_t, std::size_t)>& progress = {}) {
  if (masks.empty()) throw EmptyDataset("generate_candidates: no guiding masks");
  if (backgrounds.empty()) throw EmptyDataset("generate_candidates: no backgrounds");
  const NoiseSchedule schedule = make_schedule(model.schedule);
  std::vector<ImageMaskPair> out;
  std::size_t passed = 0;
  const auto wanted = static_cast<std::size_t>(g.n_generated);
  const auto budget = static_cast<std::size_t>(g.max_candidates);
  std::size_t k = 0;
  while (passed < wanted && k < budget) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(g.batch), budget - k);
    std::vector<GuidanceRequest> reqs;
    std::vector<GeneratedRecord> recs;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = k + i;
      const std::uint64_t s = derive_seed(seed, c);
      const auto& bg = backgrounds[splitmix64(s) % backgrounds.size()];
      GuidingMask gm = candidate_mask(masks, c);
      char id[32];
      std::snprintf(id, sizeof(id), "gen%05zu", c);
      recs.push_back({id, s, model.model_id, gm.id, bg.id});
      reqs.push_back({bg.image, std::move(gm.mask), &model, std::nullopt, s, g.stochastic});
    }
    auto pairs = generate_batch(reqs, schedule);
    for (std::size_t i = 0; i < n && passed < wanted; ++i) {
      ImageMaskPair& p = pairs[i];
      p.id = recs[i].pair_id;
      p.meta["mask_id"] = recs[i].mask_id;
      p.meta["background_id"] = recs[i].background_id;
      quantize_8bit(p.image);
      if (!accept || accept(p)) ++passed;
      out.push_back(std::move(p));
    }
    k += n;
    if (progress) progress(passed, k);
  }
  return out;
}

/// Similarity predicate matching filter_pairs for the given references.
inline CandidateFilter similarity_filter(std::span<const ImageTensor> references, double lo, double hi,
                                         std::shared_ptr<const FeatureExtractor> extractor) {
  auto feats = std::make_shared<std::vector<FeatureVector>>();
  for (const auto& r : references) feats->push_back(extract_features(r, *extractor));
  return [feats, lo, hi, extractor](const ImageMaskPair& p) {
    const FeatureVector f = extract_features(p.image, *extractor);
    double best = -2.0;
    for (const auto& r : *feats) best = std::max(best, cosine_similarity(f, r));
    return classify(best, lo, hi) == Verdict::kept;
  };
}

// ---------------------------------------------------------------------------
// Artifact bookkeeping

namespace detail {

inline void add_artifacts(StageRecord& stage, const std::filesystem::path& run_dir,
                          std::initializer_list<std::filesystem::path> rel_paths) {
  namespace fs = std::filesystem;
  for (const auto& rel : rel_paths) {
    const fs::path p = run_dir / rel;
    std::vector<fs::path> files;
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
    } else {
      files.push_back(p);
    }
    for (const auto& f : files) {
      stage.artifacts.push_back({fs::relative(f, run_dir).generic_string(), sha256_file(f)});
    }
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline void write_seg_trace(const std::filesystem::path& path, const std::vector<SegEpoch>& trace) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_dice,val_iou\n";
  out.precision(17);
  for (const auto& e : trace) out << e.epoch << ',' << e.train_loss << ',' << e.val_dice << ',' << e.val_iou << '\n';
}

}  // namespace detail

inline void write_guiding_masks(const std::filesystem::path& dir, std::span<const GuidingMask> masks,
                                std::span<const MaskSample> samples, double threshold) {
  std::filesystem::create_directories(dir);
  std::ofstream jl(dir / "masks.jsonl");
  for (std::size_t i = 0; i < masks.size(); ++i) {
    save_mask(dir / (masks[i].id + ".png"), masks[i].mask);
    nlohmann::json j = {{"mask_id", masks[i].id}, {"threshold", threshold}};
    if (i < samples.size()) {
      j["seed"] = samples[i].seed;
      j["draw"] = samples[i].draw;
      j["area_fraction"] = samples[i].area_fraction;
    }
    jl << j.dump() << '\n';
  }
}

inline std::vector<GuidingMask> read_guiding_masks(const std::filesystem::path& dir) {
  std::ifstream in(dir / "masks.jsonl");
  if (!in) throw IoError("cannot read " + (dir / "masks.jsonl").string());
  std::vector<GuidingMask> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto id = nlohmann::json::parse(line).at("mask_id").get<std::string>();
    out.push_back({id, load_mask(dir / (id + ".png"))});
  }
  return out;
}

inline void write_backgrounds(const std::filesystem::path& dir, std::span<const NamedImage> bgs) {
  std::filesystem::create_directories(dir);
  std::ofstream list(dir / "backgrounds.txt");
  for (const auto& b : bgs) {
    save_image(dir / (b.id + ".png"), b.image);
    list << b.id << '\n';
  }
}

inline std::vector<NamedImage> read_backgrounds(const std::filesystem::path& dir) {
  std::vector<NamedImage> out;
  for (const auto& id : detail::read_id_list(dir / "backgrounds.txt")) {
    out.push_back({id, load_image(dir / (id + ".png"))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// The run

struct PipelineOptions {
  std::function<void(const std::string&)> on_stage;  // called when a stage starts
};

/// Executes the nine stages in order, writing artifacts and manifest.json
/// under out_dir. Throws PipelineError (with the partial manifest, which is
/// also written) when a stage fails.
inline RunManifest run_pipeline(const PipelineConfig& config, const Dataset& dataset,
                                const std::filesystem::path& out_dir, const PipelineOptions& options = {}) {
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  config.validate();
  dataset.validate();
  if (dataset.train_ids.empty()) throw EmptyDataset("run_pipeline: train split is empty");
  fs::create_directories(out_dir);
  fs::create_directories(out_dir / "models");

  RunManifest m;
  m.config = config;
  m.dataset_name = dataset.name;
  m.seeds = stage_seeds(config.seed);
  m.seeds["root"] = config.seed;
  for (Split s : {Split::train, Split::val, Split::test}) {
    m.split_sizes[to_string(s)] = dataset.ids(s).size();
    m.split_hashes[to_string(s)] = split_hash(dataset, s);
  }
  for (const char* name : kStageNames) m.stages.push_back({name, StageStatus::pending, 0.0, m.seeds.at(name), {}, {}});

  const auto train = dataset.split(Split::train);
  const auto val = dataset.split(Split::val);
  const auto test = dataset.split(Split::test);
  if (!train.empty() && train.front().image.height != config.finetune.image_size) {
    throw ShapeMismatch("run_pipeline: dataset images do not match the configured image size");
  }

  // Shared state across stages.
  Checkpoint lesion_model, background_model;
  std::vector<GuidingMask> guiding;
  std::vector<NamedImage> backgrounds;
  std::vector<ImageMaskPair> candidates;
  FilterResult filtered;
  SegTrainResult seg_base, seg_aug;
  std::vector<ImageMaskPair> augmented_train;
  std::vector<ImageTensor> references;
  std::vector<std::string> reference_ids;
  for (const auto& p : train) {
    references.push_back(p.image);
    reference_ids.push_back(p.id);
  }
  const auto extractor = std::make_shared<PatchMeanExtractor>(config.curation.grid, train.front().image.channels);

  auto run_stage = [&](const std::string& name, const std::function<void(StageRecord&)>& body) {
    StageRecord& rec = m.stage(name);
    if (options.on_stage) options.on_stage(name);
    log_info("stage " + name);
    const auto t0 = clock::now();
    try {
      body(rec);
      if (rec.status == StageStatus::pending) rec.status = StageStatus::completed;
    } catch (const PipelineError&) {
      throw;
    } catch (const std::exception& e) {
      rec.status = StageStatus::failed;
      rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
      m.error = name + ": " + e.what();
      save_manifest(m, out_dir / "manifest.json");
      throw PipelineError("stage " + name + " failed: " + e.what(), m);
    }
    rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  };

  // (1) lesion model on at most finetune_pairs train pairs
  run_stage("finetune_lesion", [&](StageRecord& rec) {
    const auto pairs = select_pairs(train, static_cast<std::size_t>(config.guidance.finetune_pairs),
                                    derive_seed(rec.seed, "select"));
    auto res = train_conditioned_model(pairs, config, MaskMode::lesion, rec.seed);
    lesion_model = std::move(res.checkpoint);
    save_checkpoint(lesion_model, out_dir / "models/lesion.ckpt");
    write_loss_trace_csv(out_dir / "models/lesion_loss.csv", res.loss_trace);
    rec.info = {{"pairs", pairs.size()}, {"iterations", res.loss_trace.size()}};
    detail::add_artifacts(rec, out_dir, {"models/lesion.ckpt", "models/lesion_loss.csv"});
  });

  // (2) background model with inverted masks, unless backgrounds are provided
  run_stage("finetune_background", [&](StageRecord& rec) {
    if (!dataset.backgrounds.empty()) {
      rec.status = StageStatus::skipped;
      rec.info = {{"reason", "dataset provides lesion-free backgrounds"}};
      return;
    }
    const auto pairs = select_pairs(train, static_cast<std::size_t>(config.guidance.finetune_pairs),
                                    derive_seed(rec.seed, "select"));
    auto res = train_conditioned_model(pairs, config, MaskMode::inverted, rec.seed);
    background_model = std::move(res.checkpoint);
    save_checkpoint(background_model, out_dir / "models/background.ckpt");
    write_loss_trace_csv(out_dir / "models/background_loss.csv", res.loss_trace);
    rec.info = {{"pairs", pairs.size()}, {"iterations", res.loss_trace.size()}};
    detail::add_artifacts(rec, out_dir, {"models/background.ckpt", "models/background_loss.csv"});
  });

  // (3) mask model and guiding masks
  run_stage("mask_synthesis", [&](StageRecord& rec) {
    MaskModelConfig mc = config.mask_model;
    mc.seed = derive_seed(rec.seed, "train");
    const auto masks = mask_training_set(train, mc.image_size);
    auto res = train_mask_model(masks, mc);
    save_checkpoint(res.checkpoint, out_dir / "models/mask.ckpt");
    write_loss_trace_csv(out_dir / "models/mask_loss.csv", res.loss_trace);
    const auto samples = sample_masks(res.checkpoint, config.guidance.n_masks, derive_seed(rec.seed, "sample"),
                                      make_schedule(mc.schedule), config.mask_sampling);
    const int size = config.finetune.image_size;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "mask%04zu", i);
      guiding.push_back({id, upsample_mask(samples[i].binary, size)});
    }
    write_guiding_masks(out_dir / "masks", guiding, samples, config.mask_sampling.threshold);
    const std::size_t draws = samples.empty() ? 0 : samples.back().draw + 1;
    rec.info = {{"training_masks", masks.size()},
                {"accepted", samples.size()},
                {"draws", draws},
                {"acceptance_rate", draws ? static_cast<double>(samples.size()) / static_cast<double>(draws) : 0.0}};
    detail::add_artifacts(rec, out_dir, {"models/mask.ckpt", "models/mask_loss.csv", "masks"});
  });

  // (4) backgrounds: provided ones first, repaired train images otherwise
  run_stage("backgrounds", [&](StageRecord& rec) {
    const auto n = static_cast<std::size_t>(config.guidance.n_backgrounds);
    if (!dataset.backgrounds.empty()) {
      std::vector<std::size_t> idx(dataset.backgrounds.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      Rng rng(rec.seed);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(std::min(n, idx.size()));
      std::sort(idx.begin(), idx.end());
      for (auto i : idx) backgrounds.push_back(dataset.backgrounds[i]);
      rec.info = {{"source", "dataset"}, {"count", backgrounds.size()}};
    } else {
      const auto sources = select_pairs(train, n, derive_seed(rec.seed, "select"));
      const NoiseSchedule schedule = make_schedule(background_model.schedule);
      for (std::size_t start = 0; start < sources.size(); start += static_cast<std::size_t>(config.guidance.batch)) {
        const std::size_t end = std::min(sources.size(), start + static_cast<std::size_t>(config.guidance.batch));
        std::vector<GuidanceRequest> reqs;
        for (std::size_t i = start; i < end; ++i) {
          reqs.push_back({sources[i].image, sources[i].mask, &background_model, std::nullopt,
                          derive_seed(rec.seed, i), config.guidance.stochastic});
        }
        auto out = generate_batch(reqs, schedule);
        for (std::size_t i = start; i < end; ++i) {
          quantize_8bit(out[i - start].image);  // as stored, so replays start from the same pixels
          backgrounds.push_back({"repaired-" + sources[i].id, std::move(out[i - start].image)});
        }
      }
      rec.info = {{"source", "repair_to_healthy"}, {"count", backgrounds.size()}};
    }
    write_backgrounds(out_dir / "backgrounds", backgrounds);
    detail::add_artifacts(rec, out_dir, {"backgrounds"});
  });

  // (5) guided generation until n_generated candidates would pass curation
  run_stage("generation", [&](StageRecord& rec) {
    const auto accept = similarity_filter(references, config.curation.lo, config.curation.hi, extractor);
    candidates = generate_candidates(lesion_model, guiding, backgrounds, config.guidance, rec.seed, accept);
    write_pairs(out_dir / "generated", candidates);
    rec.info = {{"candidates", candidates.size()}};
    detail::add_artifacts(rec, out_dir, {"generated"});
  });

  // (6) similarity filter, then erosion of the kept masks
  run_stage("curation", [&](StageRecord& rec) {
    filtered = filter_pairs(candidates, references, config.curation.lo, config.curation.hi, *extractor, reference_ids);
    erode_kept(filtered.kept, filtered.report, config.curation.erosion);
    m.quality_report = "quality_report.json";
    m.kept = filtered.report.kept();
    m.too_similar = filtered.report.count(Verdict::too_similar);
    m.too_dissimilar = filtered.report.count(Verdict::too_dissimilar);
    detail::write_text(out_dir / "quality_report.json", to_json(filtered.report).dump(2) + "\n");
    write_pairs(out_dir / "curated", filtered.kept);
    write_pairs(out_dir / "rejected", filtered.rejected);
    rec.info = {{"kept", m.kept}, {"too_similar", m.too_similar}, {"too_dissimilar", m.too_dissimilar}};
    detail::add_artifacts(rec, out_dir, {"quality_report.json", "curated", "rejected"});
    if (filtered.kept.empty()) {
      rec.status = StageStatus::failed;
      m.error = "curation: no generated pair survived filtering";
      save_manifest(m, out_dir / "manifest.json");
      throw PipelineError("curation kept zero pairs", m, filtered.report);
    }
  });

  // (7) baseline and augmented segmenters with identical settings
  run_stage("segmentation", [&](StageRecord& rec) {
    for (const auto& p : filtered.kept) {
      for (Split s : {Split::val, Split::test}) {
        const auto& ids = dataset.ids(s);
        if (std::find(ids.begin(), ids.end(), p.id) != ids.end()) {
          throw InvalidArgument("synthetic pair id '" + p.id + "' collides with the " + to_string(s) + " split");
        }
      }
    }
    SegConfig sc = config.seg;
    sc.seed = rec.seed;
    seg_base = train_segmenter(train, val, sc);
    augmented_train = train;
    augmented_train.insert(augmented_train.end(), filtered.kept.begin(), filtered.kept.end());
    seg_aug = train_segmenter(augmented_train, val, sc);
    save_checkpoint(seg_base.checkpoint, out_dir / "models/seg_baseline.ckpt");
    save_checkpoint(seg_aug.checkpoint, out_dir / "models/seg_augmented.ckpt");
    detail::write_seg_trace(out_dir / "models/seg_baseline_trace.csv", seg_base.trace);
    detail::write_seg_trace(out_dir / "models/seg_augmented_trace.csv", seg_aug.trace);
    rec.info = {{"train_baseline", train.size()}, {"train_augmented", augmented_train.size()}};
    detail::add_artifacts(rec, out_dir,
                          {"models/seg_baseline.ckpt", "models/seg_augmented.ckpt", "models/seg_baseline_trace.csv",
                           "models/seg_augmented_trace.csv"});
  });

  // (8) both models on the untouched test split
  run_stage("evaluation", [&](StageRecord& rec) {
    auto record = [&](const SegTrainResult& r, std::size_t train_size) {
      const SegMetrics mt = evaluate(r.checkpoint, test, config.seg.threshold);
      EvalRecord e;
      e.dice = mt.dice;
      e.iou = mt.iou;
      e.n_images = mt.n_images;
      e.train_size = static_cast<int>(train_size);
      e.best_epoch = r.best_epoch;
      e.best_val_dice = r.best_val.dice;
      e.test_hash = pairs_hash(test);
      return e;
    };
    m.baseline = record(seg_base, train.size());
    m.augmented = record(seg_aug, augmented_train.size());
    rec.info = {{"test_pairs", test.size()}};
  });

  // (9) metrics, report and the manifest itself
  run_stage("report", [&](StageRecord& rec) {
    nlohmann::json metrics = {{"dataset", m.dataset_name},
                              {"baseline", to_json(*m.baseline)},
                              {"augmented", to_json(*m.augmented)},
                              {"delta_dice", m.augmented->dice - m.baseline->dice},
                              {"delta_iou", m.augmented->iou - m.baseline->iou},
                              {"kept", m.kept},
                              {"too_similar", m.too_similar},
                              {"too_dissimilar", m.too_dissimilar}};
    detail::write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
    detail::add_artifacts(rec, out_dir, {"metrics.json"});
  });
  detail::write_text(out_dir / "report.txt", report(m).text);
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

// ---------------------------------------------------------------------------
// Replay

/// Artifacts of `original` whose checksum differs in `replayed`.
inline std::vector<std::string> compare_artifacts(const RunManifest& original, const RunManifest& replayed) {
  std::map<std::string, std::string> other;
  for (const auto& s : replayed.stages) {
    for (const auto& a : s.artifacts) other[a.path] = a.sha256;
  }
  std::vector<std::string> diff;
  for (const auto& s : original.stages) {
    for (const auto& a : s.artifacts) {
      auto it = other.find(a.path);
      if (it == other.end() || it->second != a.sha256) diff.push_back(a.path);
    }
  }
  return diff;
}

/// Re-runs the whole pipeline from a manifest's config into out_dir and
/// returns the artifacts whose checksums changed (empty when reproduced).
inline std::vector<std::string> replay_run(const RunManifest& original, const std::filesystem::path& out_dir) {
  const Dataset ds = load_dataset(original.config.dataset);
  const RunManifest replayed = run_pipeline(original.config, ds, out_dir);
  return compare_artifacts(original, replayed);
}

/// Regenerates the stage-5 candidates of a finished run from its stored
/// lesion model, guiding masks, backgrounds and stage seed, writing them to
/// out_dir/generated. Returns the generated files whose checksums differ from
/// the manifest.
inline std::vector<std::string> replay_generation(const std::filesystem::path& run_dir,
                                                  const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  const RunManifest m = load_manifest(run_dir / "manifest.json");
  const auto& gen = m.stage("generation");
  if (gen.status != StageStatus::completed) throw InvalidArgument("replay_generation: generation did not complete");
  const Checkpoint lesion = load_checkpoint(run_dir / "models/lesion.ckpt");
  const auto masks = read_guiding_masks(run_dir / "masks");
  const auto bgs = read_backgrounds(run_dir / "backgrounds");
  const Dataset ds = load_dataset(m.config.dataset);
  std::vector<ImageTensor> refs;
  for (const auto& p : ds.split(Split::train)) refs.push_back(p.image);
  const auto extractor = std::make_shared<PatchMeanExtractor>(m.config.curation.grid, refs.front().channels);
  const auto accept = similarity_filter(refs, m.config.curation.lo, m.config.curation.hi, extractor);
  const auto pairs = generate_candidates(lesion, masks, bgs, m.config.guidance, gen.seed, accept);
  fs::create_directories(out_dir);
  write_pairs(out_dir / "generated", pairs);
  StageRecord replayed;
  detail::add_artifacts(replayed, out_dir, {"generated"});
  std::map<std::string, std::string> now;
  for (const auto& a : replayed.artifacts) now[a.path] = a.sha256;
  std::vector<std::string> diff;
  for (const auto& a : gen.artifacts) {
    auto it = now.find(a.path);
    if (it == now.end() || it->second != a.sha256) diff.push_back(a.path);
  }
  if (now.size() != gen.artifacts.size()) diff.push_back("<file count differs>");
  return diff;
}

}  // namespace maskdiff
