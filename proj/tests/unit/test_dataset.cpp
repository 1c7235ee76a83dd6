// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "maskdiff/dataset.hpp"
#include "maskdiff/image_io.hpp"

using namespace maskdiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("maskdiff_ds_" + std::to_string(std::random_device{}()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Raster gray(int h, int w, std::vector<std::uint8_t> px) {
  Raster r;
  r.height = h;
  r.width = w;
  r.channels = 1;
  r.pixels = std::move(px);
  return r;
}

}  // namespace

TEST(Splits, SixtyTwentyTwenty) {
  const auto s = split_sizes(10);
  EXPECT_EQ(s.train, 6u);
  EXPECT_EQ(s.val, 2u);
  EXPECT_EQ(s.test, 2u);
  const auto big = split_sizes(50);
  EXPECT_EQ(big.train + big.val + big.test, 50u);
  EXPECT_EQ(big.test, 10u);
  EXPECT_THROW(split_sizes(10, 0.7, 0.5), InvalidArgument);
}

TEST(Splits, PartitionIsDisjointCoveringAndSeeded) {
  const auto ds = synth_toy_dataset(3, 20);
  std::set<std::string> all;
  for (Split s : {Split::train, Split::val, Split::test}) {
    for (const auto& id : ds.ids(s)) EXPECT_TRUE(all.insert(id).second) << id;
  }
  EXPECT_EQ(all.size(), 20u);
  EXPECT_EQ(ds.train_ids.size(), 12u);
  EXPECT_NO_THROW(ds.validate());
  auto other = ds;
  assign_splits(other, 4);
  EXPECT_NE(other.test_ids, ds.test_ids);
  auto again = ds;
  assign_splits(again, 3);
  EXPECT_EQ(again.test_ids, ds.test_ids);
}

TEST(Splits, ValidateCatchesOverlapAndUnknownIds) {
  auto ds = synth_toy_dataset(3, 10);
  auto dup = ds;
  dup.val_ids.push_back(dup.train_ids.front());
  EXPECT_THROW(dup.validate(), InvalidArgument);
  auto unknown = ds;
  unknown.test_ids.push_back("nope");
  EXPECT_THROW(unknown.validate(), InvalidArgument);
  auto partial = ds;
  partial.train_ids.pop_back();
  EXPECT_THROW(partial.validate(), InvalidArgument);
}

TEST(ToyData, DeterministicPerSeed) {
  ToyDatasetOptions opt;
  opt.backgrounds = 3;
  const auto a = synth_toy_dataset(9, 12, opt), b = synth_toy_dataset(9, 12, opt), c = synth_toy_dataset(10, 12, opt);
  EXPECT_EQ(split_hash(a, Split::train), split_hash(b, Split::train));
  EXPECT_EQ(split_hash(a, Split::test), split_hash(b, Split::test));
  ASSERT_EQ(a.backgrounds.size(), 3u);
  EXPECT_EQ(a.backgrounds[2].image, b.backgrounds[2].image);
  EXPECT_NE(a.pairs[0].image, c.pairs[0].image);
  EXPECT_THROW(synth_toy_dataset(0, 9), InvalidArgument);
}

TEST(ToyData, MasksAreSingleDarkEllipsesInsideTheFrame) {
  const auto ds = synth_toy_dataset(11, 30);
  for (const auto& p : ds.pairs) {
    ASSERT_EQ(p.image.height, 64);
    ASSERT_TRUE(p.mask.is_binary());
    const double area = p.mask.area_fraction();
    EXPECT_GT(area, 0.0);
    EXPECT_LT(area, 0.25);
    // the frame border never carries lesion
    for (int i = 0; i < 64; ++i) {
      EXPECT_EQ(p.mask.at(0, i), 0);
      EXPECT_EQ(p.mask.at(63, i), 0);
      EXPECT_EQ(p.mask.at(i, 0), 0);
      EXPECT_EQ(p.mask.at(i, 63), 0);
    }
    // lesion pixels are darker than the tissue two to three pixels out, and
    // the visible lesion spills one pixel past the annotation
    auto distance = [&](int y, int x) {
      int best = 99;
      for (int dy = -3; dy <= 3; ++dy) {
        for (int dx = -3; dx <= 3; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < 64 && xx >= 0 && xx < 64 && p.mask.at(yy, xx)) {
            best = std::min(best, std::max(std::abs(dy), std::abs(dx)));
          }
        }
      }
      return best;
    };
    double lesion = 0, ring = 0;
    int nl = 0, nr = 0;
    std::vector<float> halo;
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        if (p.mask.at(y, x)) {
          lesion += p.image.at(0, y, x);
          ++nl;
          continue;
        }
        const int d = distance(y, x);
        if (d == 1) halo.push_back(p.image.at(0, y, x));
        if (d == 2 || d == 3) {
          ring += p.image.at(0, y, x);
          ++nr;
        }
      }
    }
    EXPECT_GT(ring / nr - lesion / nl, 0.5) << p.id;
    const double mid = 0.5 * (ring / nr + lesion / nl);
    const auto dark = std::count_if(halo.begin(), halo.end(), [&](float v) { return v < mid; });
    EXPECT_GT(static_cast<double>(dark) / static_cast<double>(halo.size()), 0.5) << p.id;
  }
}

TEST(ToyData, PixelsSitOnTheEightBitGrid) {
  const auto ds = synth_toy_dataset(12, 10);
  for (const auto& p : ds.pairs) {
    auto q = p.image;
    quantize_8bit(q);
    EXPECT_EQ(q, p.image);
  }
}

TEST(ImageIo, PngAndPnmRoundTripsAreLossless) {
  TempDir dir;
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int channels : {1, 3}) {
    Raster r;
    r.width = 7;
    r.height = 5;
    r.channels = channels;
    for (int i = 0; i < 35 * channels; ++i) r.pixels.push_back(static_cast<std::uint8_t>(byte(rng)));
    for (const char* ext : {".png", channels == 1 ? ".pgm" : ".ppm"}) {
      const auto path = dir.path / (std::string("img") + std::to_string(channels) + ext);
      write_raster(path, r);
      const auto back = read_raster(path);
      EXPECT_EQ(back.pixels, r.pixels) << path;
      EXPECT_EQ(back.channels, channels);
      const auto t = load_image(path);
      save_image(dir.path / (std::string("again") + ext), t);
      EXPECT_EQ(load_image(dir.path / (std::string("again") + ext)), t);
    }
  }
}

TEST(ImageIo, UnsupportedAndMissingFiles) {
  TempDir dir;
  EXPECT_THROW(read_raster(dir.path / "missing.png"), IoError);
  EXPECT_THROW(write_raster(dir.path / "x.bmp", gray(1, 1, {0})), IoError);
  std::ofstream(dir.path / "bad.png") << "not a png";
  EXPECT_THROW(read_raster(dir.path / "bad.png"), Error);
}

TEST(Masks, BinarizedAtHalfScaleAndStoredAsZeroOr255) {
  TempDir dir;
  write_raster(dir.path / "m.png", gray(1, 6, {0, 1, 127, 128, 200, 255}));
  const auto m = load_mask(dir.path / "m.png");
  EXPECT_EQ(m.values, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1}));
  save_mask(dir.path / "out.png", m);
  const auto r = read_raster(dir.path / "out.png");
  EXPECT_EQ(r.pixels, (std::vector<std::uint8_t>{0, 0, 0, 255, 255, 255}));
  EXPECT_EQ(load_mask(dir.path / "out.png"), m);
}

TEST(Ingest, WrittenDatasetReadsBackIdentically) {
  TempDir dir;
  ToyDatasetOptions opt;
  opt.image_size = 16;
  opt.backgrounds = 2;
  const auto ds = synth_toy_dataset(5, 10, opt);
  write_dataset(ds, dir.path);
  const auto back = ingest_dataset(dir.path);
  EXPECT_EQ(back.train_ids, ds.train_ids);
  EXPECT_EQ(back.test_ids, ds.test_ids);
  for (Split s : {Split::train, Split::val, Split::test}) EXPECT_EQ(split_hash(back, s), split_hash(ds, s));
  ASSERT_EQ(back.backgrounds.size(), 2u);
  EXPECT_EQ(back.backgrounds[1].image, ds.backgrounds[1].image);
}

TEST(Ingest, SeededSplitWithoutSplitFiles) {
  TempDir dir;
  ToyDatasetOptions opt;
  opt.image_size = 16;
  write_dataset(synth_toy_dataset(5, 10, opt), dir.path);
  fs::remove_all(dir.path / "splits");
  IngestOptions io;
  io.split_seed = 8;
  const auto a = ingest_dataset(dir.path, io), b = ingest_dataset(dir.path, io);
  EXPECT_EQ(a.test_ids, b.test_ids);
  EXPECT_EQ(a.train_ids.size(), 6u);
  EXPECT_EQ(a.val_ids.size(), 2u);
}

TEST(Ingest, MissingMaskNamesTheStem) {
  TempDir dir;
  ToyDatasetOptions opt;
  opt.image_size = 16;
  write_dataset(synth_toy_dataset(5, 10, opt), dir.path);
  fs::remove(dir.path / "masks" / "toy0007.png");
  try {
    ingest_dataset(dir.path);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("toy0007"), std::string::npos) << e.what();
  }
}

TEST(Ingest, ResizesToTheRequestedSize) {
  TempDir dir;
  ToyDatasetOptions opt;
  opt.image_size = 32;
  write_dataset(synth_toy_dataset(5, 10, opt), dir.path);
  IngestOptions io;
  io.resize_to = 16;
  const auto ds = ingest_dataset(dir.path, io);
  for (const auto& p : ds.pairs) {
    EXPECT_EQ(p.image.height, 16);
    EXPECT_EQ(p.mask.width, 16);
    EXPECT_TRUE(p.mask.is_binary());
  }
}

TEST(Ingest, RejectsBadLayouts) {
  TempDir dir;
  EXPECT_THROW(ingest_dataset(dir.path), IoError);
  fs::create_directories(dir.path / "images");
  fs::create_directories(dir.path / "masks");
  EXPECT_THROW(ingest_dataset(dir.path), EmptyDataset);
  save_image(dir.path / "images" / "a.png", ImageTensor(1, 8, 8));
  save_mask(dir.path / "masks" / "a.png", BinaryMask(8, 6));
  EXPECT_THROW(ingest_dataset(dir.path), ShapeMismatch);
}
