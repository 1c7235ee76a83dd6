// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "maskdiff/pipeline.hpp"

using namespace maskdiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : TempDir(::testing::UnitTest::GetInstance()->current_test_info()->name()) {}
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("maskdiff_pl_" + std::to_string(std::random_device{}()) + "_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// One smoke run shared by the read-only checks below.
class SmokeRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("smoke");
    config_ = smoke_config(3);
    dataset_ = load_dataset(config_.dataset);
    manifest_ = run_pipeline(config_, dataset_, dir_->path / "run");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path run_dir() { return dir_->path / "run"; }

  static TempDir* dir_;
  static PipelineConfig config_;
  static Dataset dataset_;
  static RunManifest manifest_;
};

TempDir* SmokeRun::dir_ = nullptr;
PipelineConfig SmokeRun::config_;
Dataset SmokeRun::dataset_;
RunManifest SmokeRun::manifest_;

}  // namespace

TEST_F(SmokeRun, AllStagesRecordedInOrder) {
  ASSERT_EQ(manifest_.stages.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(manifest_.stages[i].name, kStageNames[i]);
  EXPECT_EQ(manifest_.stage("finetune_background").status, StageStatus::skipped);
  for (const auto& s : manifest_.stages) {
    if (s.name != "finetune_background") EXPECT_EQ(s.status, StageStatus::completed) << s.name;
  }
  EXPECT_TRUE(manifest_.complete());
  EXPECT_FALSE(manifest_.error.has_value());
}

TEST_F(SmokeRun, StageSeedsComeFromTheRoot) {
  const auto seeds = stage_seeds(3);
  for (const auto& s : manifest_.stages) EXPECT_EQ(s.seed, seeds.at(s.name));
  std::set<std::uint64_t> distinct;
  for (const auto& [_, v] : seeds) distinct.insert(v);
  EXPECT_EQ(distinct.size(), seeds.size());
}

TEST_F(SmokeRun, AugmentedTrainIsOriginalPlusKept) {
  ASSERT_TRUE(manifest_.baseline && manifest_.augmented);
  EXPECT_EQ(manifest_.baseline->train_size, static_cast<int>(dataset_.train_ids.size()));
  EXPECT_EQ(manifest_.augmented->train_size, manifest_.baseline->train_size + static_cast<int>(manifest_.kept));
  EXPECT_GE(manifest_.kept, 1u);
  EXPECT_EQ(manifest_.baseline->test_hash, manifest_.augmented->test_hash);
  EXPECT_EQ(manifest_.baseline->n_images, static_cast<int>(dataset_.test_ids.size()));
}

TEST_F(SmokeRun, SplitsUntouchedAndNoLeakage) {
  for (Split s : {Split::val, Split::test}) {
    EXPECT_EQ(manifest_.split_hashes.at(to_string(s)), split_hash(dataset_, s));
  }
  const auto curated = read_pairs(run_dir() / "curated");
  ASSERT_EQ(curated.size(), manifest_.kept);
  std::set<std::string> held;
  for (Split s : {Split::train, Split::val, Split::test}) {
    for (const auto& id : dataset_.ids(s)) held.insert(id);
  }
  for (const auto& p : curated) EXPECT_FALSE(held.count(p.id)) << p.id;
}

TEST_F(SmokeRun, ArtifactsOnDiskMatchTheManifest) {
  EXPECT_TRUE(verify_artifacts(manifest_, run_dir()).empty());
  for (const char* f : {"models/lesion.ckpt", "models/mask.ckpt", "models/lesion_loss.csv", "quality_report.json",
                        "metrics.json", "report.txt", "manifest.json", "models/seg_baseline.ckpt",
                        "models/seg_augmented.ckpt"}) {
    EXPECT_TRUE(fs::exists(run_dir() / f)) << f;
  }
  EXPECT_TRUE(fs::is_directory(run_dir() / "rejected"));
  const auto loaded = load_manifest(run_dir() / "manifest.json");
  EXPECT_EQ(to_json(loaded), to_json(manifest_));
  EXPECT_EQ(report(loaded).text, report(manifest_).text);
}

TEST_F(SmokeRun, QualityReportAccountsForEveryCandidate) {
  const auto generated = read_pairs(run_dir() / "generated");
  const auto rejected = read_pairs(run_dir() / "rejected");
  EXPECT_EQ(generated.size(), manifest_.kept + manifest_.too_similar + manifest_.too_dissimilar);
  EXPECT_EQ(rejected.size(), manifest_.too_similar + manifest_.too_dissimilar);
}

TEST_F(SmokeRun, FullReplayReproducesEveryChecksum) {
  TempDir again;
  EXPECT_EQ(replay_run(manifest_, again.path), std::vector<std::string>{});
}

TEST_F(SmokeRun, GenerationReplaysFromStoredArtifacts) {
  TempDir again;
  EXPECT_EQ(replay_generation(run_dir(), again.path), std::vector<std::string>{});
}

TEST(Pipeline, FailingStageLeavesAPartialManifest) {
  TempDir dir;
  auto c = smoke_config(1);
  c.mask_sampling.min_area = 0.9999;  // nothing can pass
  const auto ds = load_dataset(c.dataset);
  try {
    run_pipeline(c, ds, dir.path);
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    const auto& m = e.manifest();
    EXPECT_EQ(m.stage("finetune_lesion").status, StageStatus::completed);
    EXPECT_EQ(m.stage("mask_synthesis").status, StageStatus::failed);
    EXPECT_EQ(m.stage("generation").status, StageStatus::pending);
    ASSERT_TRUE(m.error.has_value());
    EXPECT_NE(m.error->find("mask_synthesis"), std::string::npos);
    const auto on_disk = load_manifest(dir.path / "manifest.json");
    EXPECT_EQ(to_json(on_disk), to_json(m));
    EXPECT_FALSE(on_disk.complete());
    EXPECT_THROW(report(on_disk), InvalidArgument);
  }
}

TEST(Pipeline, ZeroKeptPairsReportsTheQualityReport) {
  TempDir dir;
  auto c = smoke_config(2);
  c.curation.lo = 0.99999;
  c.curation.hi = 1.0;
  const auto ds = load_dataset(c.dataset);
  try {
    run_pipeline(c, ds, dir.path);
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    ASSERT_TRUE(e.quality_report().has_value());
    EXPECT_EQ(e.quality_report()->kept(), 0u);
    EXPECT_EQ(e.quality_report()->entries.size(), static_cast<std::size_t>(c.guidance.max_candidates));
    EXPECT_EQ(e.manifest().stage("curation").status, StageStatus::failed);
    EXPECT_TRUE(fs::exists(dir.path / "quality_report.json"));
  }
}

TEST(Pipeline, RejectsMismatchedDatasets) {
  TempDir dir;
  auto c = smoke_config(0);
  auto src = c.dataset;
  src.image_size = 16;
  EXPECT_THROW(run_pipeline(c, load_dataset(src), dir.path), ShapeMismatch);
  c.guidance.n_generated = 0;
  EXPECT_THROW(run_pipeline(c, load_dataset(c.dataset), dir.path), InvalidArgument);
}

TEST(Pipeline, MissingBackgroundsAreRepaired) {
  TempDir dir;
  auto c = smoke_config(4);
  c.dataset.backgrounds = 0;
  const auto m = run_pipeline(c, load_dataset(c.dataset), dir.path);
  EXPECT_EQ(m.stage("finetune_background").status, StageStatus::completed);
  EXPECT_TRUE(fs::exists(dir.path / "models/background.ckpt"));
  EXPECT_EQ(m.stage("backgrounds").info.at("source"), "repair_to_healthy");
  EXPECT_TRUE(verify_artifacts(m, dir.path).empty());
  TempDir again;
  EXPECT_EQ(replay_generation(dir.path, again.path), std::vector<std::string>{});
}

TEST(Pipeline, CandidateMasksCycleThroughFlips) {
  std::vector<GuidingMask> masks;
  BinaryMask m(2, 2);
  m.values = {1, 0, 0, 0};
  masks.push_back({"a", m});
  masks.push_back({"b", BinaryMask(2, 2)});
  EXPECT_EQ(candidate_mask(masks, 0).id, "a");
  EXPECT_EQ(candidate_mask(masks, 1).id, "b");
  EXPECT_EQ(candidate_mask(masks, 2).id, "a+flip_h");
  EXPECT_EQ(candidate_mask(masks, 2).mask.values, (std::vector<std::uint8_t>{0, 1, 0, 0}));
  EXPECT_EQ(candidate_mask(masks, 4).mask.values, (std::vector<std::uint8_t>{0, 0, 1, 0}));
  EXPECT_EQ(candidate_mask(masks, 6).mask.values, (std::vector<std::uint8_t>{0, 0, 0, 1}));
  EXPECT_EQ(candidate_mask(masks, 8).id, "a");
}

TEST(Pipeline, SelectPairsIsASeededSubsetInOriginalOrder) {
  const auto ds = synth_toy_dataset(0, 20);
  const auto a = select_pairs(ds.pairs, 5, 9), b = select_pairs(ds.pairs, 5, 9);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i].id, b[i].id);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_LT(a[i - 1].id, a[i].id);
  EXPECT_EQ(select_pairs(ds.pairs, 50, 9).size(), 20u);
}
