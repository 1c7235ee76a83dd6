// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maskdiff/config.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/hash.hpp"

namespace maskdiff {

struct ArtifactRef {
  std::string path;  // relative to the run directory
  std::string sha256;

  friend bool operator==(const ArtifactRef&, const ArtifactRef&) = default;
};

enum class StageStatus { pending, completed, skipped, failed };

inline std::string to_string(StageStatus s) {
  switch (s) {
    case StageStatus::pending: return "pending";
    case StageStatus::completed: return "completed";
    case StageStatus::skipped: return "skipped";
    case StageStatus::failed: return "failed";
  }
  return "?";
}

inline StageStatus parse_stage_status(const std::string& s) {
  if (s == "pending") return StageStatus::pending;
  if (s == "completed") return StageStatus::completed;
  if (s == "skipped") return StageStatus::skipped;
  if (s == "failed") return StageStatus::failed;
  throw FormatError("unknown stage status '" + s + "'");
}

struct StageRecord {
  std::string name;
  StageStatus status = StageStatus::pending;
  double seconds = 0.0;
  std::uint64_t seed = 0;
  std::vector<ArtifactRef> artifacts;
  nlohmann::json info = nlohmann::json::object();
};

struct EvalRecord {
  double dice = 0.0;
  double iou = 0.0;
  int n_images = 0;
  int train_size = 0;
  int best_epoch = 0;
  double best_val_dice = 0.0;
  std::string test_hash;
};

/// Replayable record of one pipeline run.
struct RunManifest {
  static constexpr int kVersion = 1;

  PipelineConfig config;
  std::string dataset_name;
  std::map<std::string, std::size_t> split_sizes;
  std::map<std::string, std::string> split_hashes;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<StageRecord> stages;
  std::size_t kept = 0;
  std::size_t too_similar = 0;
  std::size_t too_dissimilar = 0;
  std::string quality_report;  // relative path
  std::optional<EvalRecord> baseline;
  std::optional<EvalRecord> augmented;
  std::optional<std::string> error;

  StageRecord& stage(const std::string& name) {
    for (auto& s : stages) {
      if (s.name == name) return s;
    }
    throw InvalidArgument("manifest has no stage '" + name + "'");
  }
  const StageRecord& stage(const std::string& name) const {
    return const_cast<RunManifest*>(this)->stage(name);
  }

  bool complete() const {
    if (error || !baseline || !augmented || stages.empty()) return false;
    for (const auto& s : stages) {
      if (s.status != StageStatus::completed && s.status != StageStatus::skipped) return false;
    }
    return true;
  }
};

inline nlohmann::json to_json(const EvalRecord& e) {
  return {{"dice", e.dice},           {"iou", e.iou},
          {"n_images", e.n_images},   {"train_size", e.train_size},
          {"best_epoch", e.best_epoch}, {"best_val_dice", e.best_val_dice},
          {"test_hash", e.test_hash}};
}

inline EvalRecord eval_record_from_json(const nlohmann::json& j) {
  EvalRecord e;
  e.dice = j.at("dice").get<double>();
  e.iou = j.at("iou").get<double>();
  e.n_images = j.at("n_images").get<int>();
  e.train_size = j.at("train_size").get<int>();
  e.best_epoch = j.value("best_epoch", 0);
  e.best_val_dice = j.value("best_val_dice", 0.0);
  e.test_hash = j.at("test_hash").get<std::string>();
  return e;
}

inline nlohmann::json to_json(const RunManifest& m) {
  using nlohmann::json;
  json stages = json::array();
  for (const auto& s : m.stages) {
    json arts = json::array();
    for (const auto& a : s.artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}});
    stages.push_back({{"name", s.name},
                      {"status", to_string(s.status)},
                      {"seconds", s.seconds},
                      {"seed", s.seed},
                      {"artifacts", arts},
                      {"info", s.info}});
  }
  json j = {{"format", "maskdiff-run"},
            {"version", RunManifest::kVersion},
            {"config", to_json(m.config)},
            {"dataset", {{"name", m.dataset_name}, {"split_sizes", m.split_sizes}, {"split_hashes", m.split_hashes}}},
            {"seeds", m.seeds},
            {"stages", stages},
            {"quality",
             {{"report", m.quality_report},
              {"kept", m.kept},
              {"too_similar", m.too_similar},
              {"too_dissimilar", m.too_dissimilar}}},
            {"metrics",
             {{"baseline", m.baseline ? to_json(*m.baseline) : json(nullptr)},
              {"augmented", m.augmented ? to_json(*m.augmented) : json(nullptr)}}},
            {"error", m.error ? json(*m.error) : json(nullptr)}};
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "maskdiff-run") throw FormatError("not a maskdiff run manifest");
  const int version = j.at("version").get<int>();
  if (version != RunManifest::kVersion) {
    throw FormatError("unsupported manifest version " + std::to_string(version));
  }
  RunManifest m;
  const auto& cfg = j.at("config");
  m.config = config_from_json(cfg, preset_config(cfg.value("profile", std::string("toy"))));
  m.dataset_name = j.at("dataset").at("name").get<std::string>();
  m.split_sizes = j.at("dataset").at("split_sizes").get<std::map<std::string, std::size_t>>();
  m.split_hashes = j.at("dataset").at("split_hashes").get<std::map<std::string, std::string>>();
  m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  for (const auto& s : j.at("stages")) {
    StageRecord r;
    r.name = s.at("name").get<std::string>();
    r.status = parse_stage_status(s.at("status").get<std::string>());
    r.seconds = s.at("seconds").get<double>();
    r.seed = s.at("seed").get<std::uint64_t>();
    for (const auto& a : s.at("artifacts")) {
      r.artifacts.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>()});
    }
    r.info = s.value("info", nlohmann::json::object());
    m.stages.push_back(std::move(r));
  }
  const auto& q = j.at("quality");
  m.quality_report = q.value("report", std::string());
  m.kept = q.value("kept", std::size_t{0});
  m.too_similar = q.value("too_similar", std::size_t{0});
  m.too_dissimilar = q.value("too_dissimilar", std::size_t{0});
  const auto& met = j.at("metrics");
  if (!met.at("baseline").is_null()) m.baseline = eval_record_from_json(met.at("baseline"));
  if (!met.at("augmented").is_null()) m.augmented = eval_record_from_json(met.at("augmented"));
  if (!j.at("error").is_null()) m.error = j.at("error").get<std::string>();
  return m;
}

inline void save_manifest(const RunManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << to_json(m).dump(2) << '\n';
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

/// Artifacts whose on-disk checksum differs from the record (missing files
/// included). Empty when the run directory is intact.
inline std::vector<std::string> verify_artifacts(const RunManifest& m, const std::filesystem::path& run_dir) {
  std::vector<std::string> bad;
  for (const auto& s : m.stages) {
    for (const auto& a : s.artifacts) {
      const auto p = run_dir / a.path;
      if (!std::filesystem::exists(p) || sha256_file(p) != a.sha256) bad.push_back(a.path);
    }
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Report

struct RunReport {
  std::string text;
  nlohmann::json json;
};

namespace detail {

inline std::string fixed(double v, int digits, bool sign = false) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), sign ? "%+.*f" : "%.*f", digits, v);
  return buf;
}

inline std::string pad_right(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

inline std::string pad_left(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

}  // namespace detail

/// Dice table with one column per run (dataset) and rows for the original
/// train split, the augmented split and their difference, followed by IoU,
/// curation counts and stage timings. Pure function of the manifests.
inline RunReport report(const std::vector<RunManifest>& runs) {
  using detail::fixed;
  using detail::pad_left;
  using detail::pad_right;
  if (runs.empty()) throw InvalidArgument("report: no manifests");
  for (const auto& m : runs) {
    if (!m.complete()) throw InvalidArgument("report: manifest for '" + m.dataset_name + "' is incomplete");
  }
  constexpr std::size_t kLabel = 34, kCell = 12;
  std::ostringstream t;
  auto row = [&](const std::string& label, auto cell) {
    t << pad_right(label, kLabel);
    for (const auto& m : runs) t << pad_left(cell(m), kCell);
    t << '\n';
  };
  auto header = [&](const std::string& title) {
    row(title, [](const RunManifest& m) { return m.dataset_name; });
    t << std::string(kLabel + kCell * runs.size(), '-') << '\n';
  };
  header("Dice");
  row("original images", [](const RunManifest& m) { return fixed(m.baseline->dice, 4); });
  row("original + generated pairs", [](const RunManifest& m) { return fixed(m.augmented->dice, 4); });
  row("delta", [](const RunManifest& m) { return fixed(m.augmented->dice - m.baseline->dice, 4, true); });
  t << '\n';
  header("IoU");
  row("original images", [](const RunManifest& m) { return fixed(m.baseline->iou, 4); });
  row("original + generated pairs", [](const RunManifest& m) { return fixed(m.augmented->iou, 4); });
  row("delta", [](const RunManifest& m) { return fixed(m.augmented->iou - m.baseline->iou, 4, true); });
  t << '\n';
  header("Curation");
  row("kept", [](const RunManifest& m) { return std::to_string(m.kept); });
  row("rejected", [](const RunManifest& m) { return std::to_string(m.too_similar + m.too_dissimilar); });
  row("  too similar", [](const RunManifest& m) { return std::to_string(m.too_similar); });
  row("  too dissimilar", [](const RunManifest& m) { return std::to_string(m.too_dissimilar); });
  row("train pairs (original)", [](const RunManifest& m) { return std::to_string(m.baseline->train_size); });
  row("train pairs (augmented)", [](const RunManifest& m) { return std::to_string(m.augmented->train_size); });
  row("test pairs", [](const RunManifest& m) { return std::to_string(m.baseline->n_images); });
  t << '\n';
  header("Stage seconds");
  for (const auto& s : runs.front().stages) {
    row(s.name, [&](const RunManifest& m) {
      const auto& r = m.stage(s.name);
      return r.status == StageStatus::skipped ? std::string("skipped") : fixed(r.seconds, 1);
    });
  }

  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : runs) {
    nlohmann::json timings = nlohmann::json::object();
    for (const auto& s : m.stages) timings[s.name] = s.seconds;
    j.push_back({{"dataset", m.dataset_name},
                 {"seed", m.config.seed},
                 {"baseline", to_json(*m.baseline)},
                 {"augmented", to_json(*m.augmented)},
                 {"delta_dice", m.augmented->dice - m.baseline->dice},
                 {"delta_iou", m.augmented->iou - m.baseline->iou},
                 {"kept", m.kept},
                 {"rejected", m.too_similar + m.too_dissimilar},
                 {"too_similar", m.too_similar},
                 {"too_dissimilar", m.too_dissimilar},
                 {"stage_seconds", timings}});
  }
  return {t.str(), j};
}

inline RunReport report(const RunManifest& m) { return report(std::vector<RunManifest>{m}); }

}  // namespace maskdiff
