// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/error.hpp"
#include "maskdiff/hash.hpp"
#include "maskdiff/image_io.hpp"
#include "maskdiff/resize.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct NamedImage {
  std::string id;
  ImageTensor image;
};

/// Image-mask pairs with a train/val/test partition over their ids. Optional
/// lesion-free backgrounds are kept apart from the pairs.
struct Dataset {
  std::string name;
  std::vector<ImageMaskPair> pairs;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  std::vector<NamedImage> backgrounds;

  const std::vector<std::string>& ids(Split s) const {
    return s == Split::train ? train_ids : (s == Split::val ? val_ids : test_ids);
  }

  const ImageMaskPair& pair(const std::string& id) const {
    auto it = std::find_if(pairs.begin(), pairs.end(), [&](const ImageMaskPair& p) { return p.id == id; });
    if (it == pairs.end()) throw InvalidArgument("dataset '" + name + "' has no pair '" + id + "'");
    return *it;
  }

  std::vector<ImageMaskPair> split(Split s) const {
    std::map<std::string, const ImageMaskPair*> by_id;
    for (const auto& p : pairs) by_id[p.id] = &p;
    std::vector<ImageMaskPair> out;
    for (const auto& id : ids(s)) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw InvalidArgument("split references unknown pair '" + id + "'");
      out.push_back(*it->second);
    }
    return out;
  }

  /// Splits are disjoint, cover every pair, and every pair has an aligned mask.
  void validate() const {
    std::set<std::string> all;
    for (const auto& p : pairs) {
      if (!all.insert(p.id).second) throw InvalidArgument("duplicate pair id '" + p.id + "'");
      require_aligned(p.image, p.mask, "dataset pair");
    }
    std::set<std::string> seen;
    for (Split s : {Split::train, Split::val, Split::test}) {
      for (const auto& id : ids(s)) {
        if (!all.count(id)) throw InvalidArgument("split references unknown pair '" + id + "'");
        if (!seen.insert(id).second) throw InvalidArgument("pair '" + id + "' appears in more than one split");
      }
    }
    if (seen.size() != all.size()) throw InvalidArgument("splits do not cover every pair");
  }
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// 60/20/20 by default; val and test get round(fraction * n) each.
inline SplitSizes split_sizes(std::size_t n, double val_fraction = 0.2, double test_fraction = 0.2) {
  SplitSizes s;
  s.test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  s.val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (s.test + s.val > n) throw InvalidArgument("split fractions exceed the dataset size");
  s.train = n - s.test - s.val;
  return s;
}

/// Seeded shuffle of the (sorted) pair ids into train/val/test.
inline void assign_splits(Dataset& ds, std::uint64_t seed, double val_fraction = 0.2, double test_fraction = 0.2) {
  std::vector<std::string> ids;
  for (const auto& p : ds.pairs) ids.push_back(p.id);
  std::sort(ids.begin(), ids.end());
  Rng rng(derive_seed(seed, "split"));
  std::shuffle(ids.begin(), ids.end(), rng);
  const SplitSizes sz = split_sizes(ids.size(), val_fraction, test_fraction);
  ds.test_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(sz.test));
  ds.val_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(sz.test),
                    ids.begin() + static_cast<std::ptrdiff_t>(sz.test + sz.val));
  ds.train_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(sz.test + sz.val), ids.end());
  for (auto* v : {&ds.train_ids, &ds.val_ids, &ds.test_ids}) std::sort(v->begin(), v->end());
}

/// SHA-256 over the split's pairs (ids, pixels, masks) in split order.
inline std::string split_hash(const Dataset& ds, Split s) {
  Sha256 h;
  for (const auto& p : ds.split(s)) hash_into(h, p);
  return h.hex();
}

inline std::string pairs_hash(std::span<const ImageMaskPair> pairs) {
  Sha256 h;
  for (const auto& p : pairs) hash_into(h, p);
  return h.hex();
}

// ---------------------------------------------------------------------------
// Ingestion

enum class DatasetLayout { paired_dirs };

struct IngestOptions {
  DatasetLayout layout = DatasetLayout::paired_dirs;
  std::uint64_t split_seed = 0;
  /// 0 keeps the native size (all files must then agree); otherwise images are
  /// resampled bilinearly and masks by nearest neighbour to size x size.
  int resize_to = 0;
  /// 0 keeps the native channel count.
  int channels = 0;
};

namespace detail {

inline std::map<std::string, std::filesystem::path> images_by_stem(const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

inline std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read split file " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

}  // namespace detail

/// Loads root/images/<stem>.* with root/masks/<stem>.*; optional
/// root/backgrounds/* (lesion-free images) and root/splits/{train,val,test}.txt.
/// Without split files a seeded 60/20/20 split is applied.
inline Dataset ingest_dataset(const std::filesystem::path& root, const IngestOptions& opt = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root / "images") || !fs::is_directory(root / "masks")) {
    throw IoError("dataset root " + root.string() + " must contain images/ and masks/");
  }
  const auto images = detail::images_by_stem(root / "images");
  const auto masks = detail::images_by_stem(root / "masks");
  std::vector<std::string> missing;
  for (const auto& [stem, _] : images) {
    if (!masks.count(stem)) missing.push_back(stem);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
    throw IoError("missing masks for: " + list);
  }
  if (images.empty()) throw EmptyDataset("dataset root " + root.string() + " has no images");

  Dataset ds;
  ds.name = root.filename().string();
  auto conform = [&](ImageTensor img) {
    if (opt.resize_to > 0 && (img.height != opt.resize_to || img.width != opt.resize_to)) {
      img = resize_bilinear(img, opt.resize_to, opt.resize_to);
    }
    return img;
  };
  for (const auto& [stem, path] : images) {
    ImageMaskPair p;
    p.id = stem;
    p.image = conform(load_image(path, opt.channels));
    p.mask = load_mask(masks.at(stem));
    if (opt.resize_to > 0 && (p.mask.height != opt.resize_to || p.mask.width != opt.resize_to)) {
      p.mask = resize_nearest(p.mask, opt.resize_to, opt.resize_to);
    }
    if (p.mask.height != p.image.height || p.mask.width != p.image.width) {
      throw ShapeMismatch("pair '" + stem + "': mask size differs from image size");
    }
    if (!ds.pairs.empty() && !p.image.same_shape(ds.pairs.front().image)) {
      throw ShapeMismatch("pair '" + stem + "' has size " + std::to_string(p.image.height) + "x" +
                          std::to_string(p.image.width) + ", inconsistent with the rest of the dataset");
    }
    p.meta["source"] = path.string();
    ds.pairs.push_back(std::move(p));
  }
  for (const auto& [stem, path] : detail::images_by_stem(root / "backgrounds")) {
    NamedImage bg{stem, conform(load_image(path, opt.channels))};
    if (!bg.image.same_shape(ds.pairs.front().image)) {
      throw ShapeMismatch("background '" + stem + "' does not match the dataset image size");
    }
    ds.backgrounds.push_back(std::move(bg));
  }
  const fs::path splits = root / "splits";
  if (fs::exists(splits / "train.txt") && fs::exists(splits / "val.txt") && fs::exists(splits / "test.txt")) {
    ds.train_ids = detail::read_id_list(splits / "train.txt");
    ds.val_ids = detail::read_id_list(splits / "val.txt");
    ds.test_ids = detail::read_id_list(splits / "test.txt");
  } else {
    assign_splits(ds, opt.split_seed);
  }
  ds.validate();
  return ds;
}

/// Writes the paired_dirs layout, including split files, readable by ingest_dataset.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  fs::create_directories(root / "splits");
  for (const auto& p : ds.pairs) {
    save_image(root / "images" / (p.id + ".png"), p.image);
    save_mask(root / "masks" / (p.id + ".png"), p.mask);
  }
  if (!ds.backgrounds.empty()) {
    fs::create_directories(root / "backgrounds");
    for (const auto& b : ds.backgrounds) save_image(root / "backgrounds" / (b.id + ".png"), b.image);
  }
  for (Split s : {Split::train, Split::val, Split::test}) {
    std::ofstream out(root / "splits" / (to_string(s) + ".txt"));
    for (const auto& id : ds.ids(s)) out << id << '\n';
  }
}

// ---------------------------------------------------------------------------
// Toy data: bright low-frequency textured backgrounds with one dark elliptical
// lesion each. Annotations trace the lesion conservatively: the mask is the
// ellipse support and the dark region reaches one pixel further, the
// convention the curation erosion brings generated pairs onto.

struct ToyDatasetOptions {
  int image_size = 64;
  int backgrounds = 0;  // extra lesion-free images
  double min_axis = 5.0 / 64.0;  // fraction of image size
  double max_axis = 12.0 / 64.0;
};

namespace detail {

inline ImageTensor toy_background(Rng& rng, int size) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> grain(0.0, 0.04);
  ImageTensor img(1, size, size);
  const double base = 0.35 + 0.2 * u(rng);
  const double vignette = 0.6 * (0.8 + 0.4 * u(rng));
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k) {
    const double freq = 1.0 + 2.0 * u(rng);  // cycles per image
    const double angle = 2.0 * std::numbers::pi * u(rng);
    waves.push_back({freq * std::cos(angle), freq * std::sin(angle), 2.0 * std::numbers::pi * u(rng),
                     0.05 + 0.05 * u(rng)});
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = base;
      for (const auto& w : waves) {
        v += w.amp * std::cos(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) / size + w.phase);
      }
      // shared illumination falloff, as in most real acquisitions
      const double rx = (x + 0.5) / size - 0.5, ry = (y + 0.5) / size - 0.5;
      v += vignette * (1.0 / 3.0 - 2.0 * (rx * rx + ry * ry));  // zero mean over the image
      v += grain(rng);
      img.at(0, y, x) = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return img;
}

}  // namespace detail

/// Snaps values to the 8-bit grid used on disk so save/load is lossless.
inline void quantize_8bit(ImageTensor& img) {
  for (auto& v : img.values) {
    const double q = std::lround((std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5);
    v = static_cast<float>(q) / 127.5f - 1.0f;  // same arithmetic as raster_to_tensor
  }
}

/// Deterministic per seed. Splits use the same seed.
inline Dataset synth_toy_dataset(std::uint64_t seed, int n, const ToyDatasetOptions& opt = {}) {
  if (n < 10) throw InvalidArgument("synth_toy_dataset: need at least 10 pairs");
  const int size = opt.image_size;
  if (size < 16) throw InvalidArgument("synth_toy_dataset: image size must be >= 16");
  Dataset ds;
  ds.name = "toy";
  Rng rng(derive_seed(seed, "toy-data"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> grain(0.0, 0.04);
  for (int i = 0; i < n; ++i) {
    ImageMaskPair p;
    char id[32];
    std::snprintf(id, sizeof(id), "toy%04d", i);
    p.id = id;
    p.image = detail::toy_background(rng, size);
    p.mask = BinaryMask(size, size);
    const double a = size * (opt.min_axis + (opt.max_axis - opt.min_axis) * u(rng));
    const double b = size * (opt.min_axis + (opt.max_axis - opt.min_axis) * u(rng));
    const double margin = std::max(a, b) + 2.0;
    const double cx = margin + (size - 2.0 * margin) * u(rng);
    const double cy = margin + (size - 2.0 * margin) * u(rng);
    const double theta = std::numbers::pi * u(rng);
    const double level = -0.85 + 0.3 * u(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u1 = dx * ct + dy * st, v1 = -dx * st + dy * ct;
        const double r2 = (u1 / a) * (u1 / a) + (v1 / b) * (v1 / b);
        // visible extent is one pixel wider than the annotation
        const double d2 = (u1 / (a + 1.0)) * (u1 / (a + 1.0)) + (v1 / (b + 1.0)) * (v1 / (b + 1.0));
        if (r2 <= 1.0) p.mask.at(y, x) = 1;
        if (d2 <= 1.0) {
          p.image.at(0, y, x) = static_cast<float>(std::clamp(level + 0.15 * d2 + grain(rng), -1.0, 1.0));
        }
      }
    }
    if (p.mask.empty_region()) p.mask.at(static_cast<int>(cy), static_cast<int>(cx)) = 1;
    quantize_8bit(p.image);
    p.meta["lesion_level"] = std::to_string(level);
    ds.pairs.push_back(std::move(p));
  }
  for (int i = 0; i < opt.backgrounds; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "bg%04d", i);
    ds.backgrounds.push_back({id, detail::toy_background(rng, size)});
    quantize_8bit(ds.backgrounds.back().image);
  }
  assign_splits(ds, seed);
  return ds;
}

}  // namespace maskdiff
