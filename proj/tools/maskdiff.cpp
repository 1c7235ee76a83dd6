// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "maskdiff/pipeline.hpp"
#include "maskdiff/runtime.hpp"

namespace fs = std::filesystem;
using namespace maskdiff;

namespace {

struct CommonOptions {
  std::string preset = "toy";
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::vector<std::string> sets;
  bool quiet = false;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "Preset config: toy, full or smoke")->capture_default_str();
    app->add_option("--config", config_path, "JSON config file (overrides --preset)");
    app->add_option("--seed", seed, "Root seed");
    app->add_option("--data", data, "Dataset root with images/ and masks/ (instead of the toy synthesizer)");
    app->add_option("--set", sets, "Override a config field, e.g. --set guidance.n_generated=150");
    app->add_flag("-q,--quiet", quiet, "Only log warnings and errors");
  }

  PipelineConfig resolve() const {
    if (quiet) set_log_level(LogLevel::warning);
    PipelineConfig c = config_path.empty() ? preset_config(preset) : load_config(config_path);
    if (seed) {
      c.seed = *seed;
      c.dataset.seed = *seed;
    }
    if (!data.empty()) {
      c.dataset.kind = "paired_dirs";
      c.dataset.root = fs::absolute(data).string();
    }
    for (const auto& s : sets) c = config_from_json(patch_for(s), c);
    c.validate();
    return c;
  }

  // "a.b=v" -> {"a": {"b": v}}; v is JSON when it parses, a string otherwise.
  static nlohmann::json patch_for(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("--set expects key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    nlohmann::json patch;
    nlohmann::json* cur = &patch;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw InvalidArgument("--set: empty key in '" + path + "'");
      if (dot == std::string::npos) {
        (*cur)[key] = value;
        break;
      }
      cur = &(*cur)[key];
      start = dot + 1;
    }
    return patch;
  }
};

std::vector<ImageTensor> images_of(std::span<const ImageMaskPair> pairs) {
  std::vector<ImageTensor> out;
  for (const auto& p : pairs) out.push_back(p.image);
  return out;
}

std::vector<NamedImage> read_background_dir(const fs::path& dir) {
  if (fs::exists(dir / "backgrounds.txt")) return read_backgrounds(dir);
  std::vector<NamedImage> out;
  for (const auto& [stem, path] : detail::images_by_stem(dir)) out.push_back({stem, load_image(path)});
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json metrics_json(const SegMetrics& m) {
  return {{"dice", m.dice}, {"iou", m.iou}, {"n_images", m.n_images}};
}

}  // namespace

int main(int argc, char** argv) {
  tune_runtime();
  CLI::App app{"maskdiff: mask-guided diffusion augmentation for lesion segmentation"};
  app.require_subcommand(1);

  // config
  CommonOptions config_opts;
  std::string config_out;
  auto* config_cmd = app.add_subcommand("config", "Print or save the resolved configuration");
  config_opts.attach(config_cmd);
  config_cmd->add_option("-o,--out", config_out, "Write the config here instead of stdout");

  // toy-data
  CommonOptions toy_opts;
  std::string toy_out;
  auto* toy_cmd = app.add_subcommand("toy-data", "Write the configured dataset in paired-directory layout");
  toy_opts.attach(toy_cmd);
  toy_cmd->add_option("-o,--out", toy_out, "Output directory")->required();

  // finetune
  CommonOptions ft_opts;
  std::string ft_out, ft_loss, ft_mode = "lesion";
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune a token-conditioned denoiser on train pairs");
  ft_opts.attach(ft_cmd);
  ft_cmd->add_option("-o,--out", ft_out, "Checkpoint path")->required();
  ft_cmd->add_option("--loss-csv", ft_loss, "Loss trace CSV path");
  ft_cmd->add_option("--mode", ft_mode, "lesion or inverted")->check(CLI::IsMember({"lesion", "inverted"}));

  // gen-masks
  CommonOptions gm_opts;
  std::string gm_out, gm_model, gm_model_out;
  auto* gm_cmd = app.add_subcommand("gen-masks", "Train the mask model (unless --model is given) and sample guiding masks");
  gm_opts.attach(gm_cmd);
  gm_cmd->add_option("-o,--out", gm_out, "Directory for masks and masks.jsonl")->required();
  gm_cmd->add_option("--model", gm_model, "Existing mask checkpoint");
  gm_cmd->add_option("--model-out", gm_model_out, "Where to save a freshly trained mask checkpoint");

  // gen-pairs
  CommonOptions gp_opts;
  std::string gp_model, gp_masks, gp_bgs, gp_out;
  bool gp_all = false;
  auto* gp_cmd = app.add_subcommand("gen-pairs", "Paint lesions onto backgrounds inside guiding masks");
  gp_opts.attach(gp_cmd);
  gp_cmd->add_option("--model", gp_model, "Lesion checkpoint")->required()->check(CLI::ExistingFile);
  gp_cmd->add_option("--masks", gp_masks, "Guiding mask directory (from gen-masks)")->required()->check(CLI::ExistingDirectory);
  gp_cmd->add_option("--backgrounds", gp_bgs, "Background image directory (default: the dataset's backgrounds)");
  gp_cmd->add_option("-o,--out", gp_out, "Output directory")->required();
  gp_cmd->add_flag("--all", gp_all, "Generate exactly n_generated pairs without similarity-aware stopping");

  // filter
  CommonOptions fl_opts;
  std::string fl_pairs, fl_out;
  auto* fl_cmd = app.add_subcommand("filter", "Similarity-filter generated pairs against the train split and erode kept masks");
  fl_opts.attach(fl_cmd);
  fl_cmd->add_option("--pairs", fl_pairs, "Directory of generated pairs")->required()->check(CLI::ExistingDirectory);
  fl_cmd->add_option("-o,--out", fl_out, "Output directory (curated/, rejected/, quality_report.json)")->required();

  // segment
  CommonOptions sg_opts;
  std::string sg_extra, sg_out, sg_metrics;
  auto* sg_cmd = app.add_subcommand("segment", "Train a segmenter on the train split (plus --extra pairs) and score the test split");
  sg_opts.attach(sg_cmd);
  sg_cmd->add_option("--extra", sg_extra, "Additional training pairs, e.g. a curated/ directory");
  sg_cmd->add_option("-o,--out", sg_out, "Checkpoint path")->required();
  sg_cmd->add_option("--metrics", sg_metrics, "Metrics JSON path");

  // run
  CommonOptions run_opts;
  std::string run_out, run_replay, run_regen;
  auto* run_cmd = app.add_subcommand("run", "Run the whole pipeline, or replay a finished run");
  run_opts.attach(run_cmd);
  run_cmd->add_option("-o,--out", run_out, "Run directory")->required();
  run_cmd->add_option("--replay", run_replay, "Re-run from this manifest and compare checksums")->check(CLI::ExistingFile);
  run_cmd->add_option("--replay-generation", run_regen, "Regenerate the synthetic pairs of this run directory")
      ->check(CLI::ExistingDirectory);

  // report
  std::vector<std::string> rp_manifests;
  std::string rp_json, rp_text;
  auto* rp_cmd = app.add_subcommand("report", "Tabulate one or more run manifests");
  rp_cmd->add_option("manifests", rp_manifests, "manifest.json files (one column each)")->required()->check(CLI::ExistingFile);
  rp_cmd->add_option("--json", rp_json, "Also write the report as JSON");
  rp_cmd->add_option("--text", rp_text, "Write the text table here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*config_cmd) {
      const auto c = config_opts.resolve();
      if (config_out.empty()) {
        std::cout << to_json(c).dump(2) << '\n';
      } else {
        save_config(c, config_out);
      }
    } else if (*toy_cmd) {
      const auto c = toy_opts.resolve();
      const Dataset ds = load_dataset(c.dataset);
      write_dataset(ds, toy_out);
      std::printf("wrote %zu pairs (%zu/%zu/%zu) and %zu backgrounds to %s\n", ds.pairs.size(), ds.train_ids.size(),
                  ds.val_ids.size(), ds.test_ids.size(), ds.backgrounds.size(), toy_out.c_str());
    } else if (*ft_cmd) {
      const auto c = ft_opts.resolve();
      const Dataset ds = load_dataset(c.dataset);
      const MaskMode mode = parse_mask_mode(ft_mode);
      const auto stage = mode == MaskMode::lesion ? "finetune_lesion" : "finetune_background";
      const std::uint64_t seed = stage_seeds(c.seed).at(stage);
      const auto pairs = select_pairs(ds.split(Split::train), static_cast<std::size_t>(c.guidance.finetune_pairs),
                                      derive_seed(seed, "select"));
      const auto res = train_conditioned_model(pairs, c, mode, seed, [](std::size_t it, double loss) {
        if ((it + 1) % 200 == 0) log_info("iteration " + std::to_string(it + 1) + " loss " + std::to_string(loss));
      });
      save_checkpoint(res.checkpoint, ft_out);
      if (!ft_loss.empty()) write_loss_trace_csv(ft_loss, res.loss_trace);
      std::printf("fine-tuned on %zu pairs, %zu iterations -> %s\n", pairs.size(), res.loss_trace.size(), ft_out.c_str());
    } else if (*gm_cmd) {
      const auto c = gm_opts.resolve();
      const std::uint64_t seed = stage_seeds(c.seed).at("mask_synthesis");
      Checkpoint model;
      if (!gm_model.empty()) {
        model = load_checkpoint(gm_model);
      } else {
        const Dataset ds = load_dataset(c.dataset);
        MaskModelConfig mc = c.mask_model;
        mc.seed = derive_seed(seed, "train");
        model = train_mask_model(mask_training_set(ds.split(Split::train), mc.image_size), mc).checkpoint;
        if (!gm_model_out.empty()) save_checkpoint(model, gm_model_out);
      }
      const auto samples = sample_masks(model, c.guidance.n_masks, derive_seed(seed, "sample"),
                                        make_schedule(model.schedule), c.mask_sampling);
      std::vector<GuidingMask> guiding;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "mask%04zu", i);
        guiding.push_back({id, upsample_mask(samples[i].binary, c.finetune.image_size)});
      }
      write_guiding_masks(gm_out, guiding, samples, c.mask_sampling.threshold);
      std::printf("accepted %zu masks in %zu draws -> %s\n", samples.size(), samples.back().draw + 1, gm_out.c_str());
    } else if (*gp_cmd) {
      const auto c = gp_opts.resolve();
      const Checkpoint model = load_checkpoint(gp_model);
      const auto masks = read_guiding_masks(gp_masks);
      std::optional<Dataset> ds;
      std::vector<NamedImage> bgs;
      if (gp_bgs.empty()) {
        ds = load_dataset(c.dataset);
        bgs = ds->backgrounds;
        if (bgs.empty()) throw InvalidArgument("gen-pairs: the dataset has no backgrounds; pass --backgrounds");
      } else {
        bgs = read_background_dir(gp_bgs);
      }
      CandidateFilter accept;
      if (!gp_all) {
        if (!ds) ds = load_dataset(c.dataset);
        const auto refs = images_of(ds->split(Split::train));
        accept = similarity_filter(refs, c.curation.lo, c.curation.hi,
                                   std::make_shared<PatchMeanExtractor>(c.curation.grid, refs.front().channels));
      }
      GuidanceSettings g = c.guidance;
      if (gp_all) g.max_candidates = g.n_generated;
      const auto pairs = generate_candidates(model, masks, bgs, g, stage_seeds(c.seed).at("generation"), accept,
                                             [](std::size_t ok, std::size_t k) {
                                               log_info(std::to_string(k) + " generated, " + std::to_string(ok) + " pass");
                                             });
      write_pairs(gp_out, pairs);
      std::printf("wrote %zu pairs to %s\n", pairs.size(), gp_out.c_str());
    } else if (*fl_cmd) {
      const auto c = fl_opts.resolve();
      const Dataset ds = load_dataset(c.dataset);
      const auto train = ds.split(Split::train);
      std::vector<std::string> ref_ids;
      for (const auto& p : train) ref_ids.push_back(p.id);
      const auto refs = images_of(train);
      const auto pairs = read_pairs(fl_pairs);
      PatchMeanExtractor extractor(c.curation.grid, refs.front().channels);
      FilterResult r = filter_pairs(pairs, refs, c.curation.lo, c.curation.hi, extractor, ref_ids);
      erode_kept(r.kept, r.report, c.curation.erosion);
      write_pairs(fs::path(fl_out) / "curated", r.kept);
      write_pairs(fs::path(fl_out) / "rejected", r.rejected);
      write_json(fs::path(fl_out) / "quality_report.json", to_json(r.report));
      std::printf("kept %zu, too similar %zu, too dissimilar %zu\n", r.report.kept(),
                  r.report.count(Verdict::too_similar), r.report.count(Verdict::too_dissimilar));
      if (r.kept.empty()) {
        std::fprintf(stderr, "error: no pair survived filtering\n");
        return 3;
      }
    } else if (*sg_cmd) {
      const auto c = sg_opts.resolve();
      const Dataset ds = load_dataset(c.dataset);
      auto train = ds.split(Split::train);
      if (!sg_extra.empty()) {
        const auto extra = read_pairs(sg_extra);
        train.insert(train.end(), extra.begin(), extra.end());
      }
      SegConfig sc = c.seg;
      sc.seed = stage_seeds(c.seed).at("segmentation");
      const auto res = train_segmenter(train, ds.split(Split::val), sc, [](const SegEpoch& e) {
        log_info("epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.train_loss) + " val dice " +
                 std::to_string(e.val_dice));
      });
      save_checkpoint(res.checkpoint, sg_out);
      const SegMetrics test = evaluate(res.checkpoint, ds.split(Split::test), sc.threshold);
      std::printf("train %zu pairs, best epoch %d (val dice %.4f); test dice %.4f iou %.4f\n", train.size(),
                  res.best_epoch, res.best_val.dice, test.dice, test.iou);
      if (!sg_metrics.empty()) {
        write_json(sg_metrics, {{"train_size", train.size()},
                                {"best_epoch", res.best_epoch},
                                {"val", metrics_json(res.best_val)},
                                {"test", metrics_json(test)},
                                {"test_hash", pairs_hash(ds.split(Split::test))}});
      }
    } else if (*run_cmd) {
      if (!run_replay.empty()) {
        const auto diff = replay_run(load_manifest(run_replay), run_out);
        for (const auto& d : diff) std::printf("checksum differs: %s\n", d.c_str());
        std::printf("%s\n", diff.empty() ? "replay reproduced every artifact" : "replay differs");
        return diff.empty() ? 0 : 4;
      }
      if (!run_regen.empty()) {
        const auto diff = replay_generation(run_regen, run_out);
        for (const auto& d : diff) std::printf("checksum differs: %s\n", d.c_str());
        std::printf("%s\n", diff.empty() ? "generation reproduced every pair" : "generation differs");
        return diff.empty() ? 0 : 4;
      }
      const auto c = run_opts.resolve();
      const Dataset ds = load_dataset(c.dataset);
      const RunManifest m = run_pipeline(c, ds, run_out);
      std::cout << report(m).text;
    } else if (*rp_cmd) {
      std::vector<RunManifest> runs;
      for (const auto& p : rp_manifests) runs.push_back(load_manifest(p));
      const RunReport r = report(runs);
      if (rp_text.empty()) {
        std::cout << r.text;
      } else {
        std::ofstream(rp_text) << r.text;
      }
      if (!rp_json.empty()) write_json(rp_json, r.json);
    }
  } catch (const PipelineError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
