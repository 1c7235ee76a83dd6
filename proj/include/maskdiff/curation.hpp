// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maskdiff/error.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

struct FeatureVector {
  std::vector<double> values;
  std::string extractor_id;
};

/// Maps an image to a fixed-length descriptor. Implementations must be
/// deterministic and safe to call concurrently.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dimension() const = 0;
  virtual std::vector<double> features(const ImageTensor& image) const = 0;
};

/// Mean of each cell of a grid x grid partition, per channel, then centred and
/// scaled to unit length. Constant images have no direction and are rejected.
class PatchMeanExtractor final : public FeatureExtractor {
 public:
  explicit PatchMeanExtractor(int grid = 8, int channels = 1) : grid_(grid), channels_(channels) {
    if (grid < 1 || channels < 1) throw InvalidArgument("PatchMeanExtractor: grid and channels must be positive");
  }

  std::string id() const override { return "patch-mean-" + std::to_string(grid_) + "x" + std::to_string(grid_); }
  std::size_t dimension() const override { return static_cast<std::size_t>(channels_) * grid_ * grid_; }

  /// Un-normalized cell means, channel-major then row-major.
  std::vector<double> patch_means(const ImageTensor& image) const {
    if (image.channels != channels_) throw ShapeMismatch("PatchMeanExtractor: channel count mismatch");
    if (image.height < grid_ || image.width < grid_) throw ShapeMismatch("PatchMeanExtractor: image smaller than grid");
    std::vector<double> out(dimension(), 0.0);
    for (int c = 0; c < channels_; ++c) {
      for (int gy = 0; gy < grid_; ++gy) {
        const int y0 = gy * image.height / grid_, y1 = (gy + 1) * image.height / grid_;
        for (int gx = 0; gx < grid_; ++gx) {
          const int x0 = gx * image.width / grid_, x1 = (gx + 1) * image.width / grid_;
          double sum = 0.0;
          for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) sum += image.at(c, y, x);
          }
          out[(static_cast<std::size_t>(c) * grid_ + gy) * grid_ + gx] = sum / ((y1 - y0) * (x1 - x0));
        }
      }
    }
    return out;
  }

  std::vector<double> features(const ImageTensor& image) const override {
    std::vector<double> v = patch_means(image);
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double norm = 0.0;
    for (double& x : v) {
      x -= mean;
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (!(norm > 1e-12)) throw ZeroNorm("PatchMeanExtractor: image has no spatial variation");
    for (double& x : v) x /= norm;
    return v;
  }

 private:
  int grid_;
  int channels_;
};

/// Adapter slot for an external backbone (e.g. a self-supervised vision
/// transformer served out of process). The callable receives the image and
/// returns its embedding.
class CallbackExtractor final : public FeatureExtractor {
 public:
  using Fn = std::function<std::vector<double>(const ImageTensor&)>;

  CallbackExtractor(std::string id, std::size_t dimension, Fn fn)
      : id_(std::move(id)), dimension_(dimension), fn_(std::move(fn)) {
    if (!fn_) throw InvalidArgument("CallbackExtractor: empty callable");
  }

  std::string id() const override { return id_; }
  std::size_t dimension() const override { return dimension_; }
  std::vector<double> features(const ImageTensor& image) const override {
    auto v = fn_(image);
    if (v.size() != dimension_) throw ShapeMismatch("CallbackExtractor: backbone returned the wrong dimension");
    return v;
  }

 private:
  std::string id_;
  std::size_t dimension_;
  Fn fn_;
};

inline FeatureVector extract_features(const ImageTensor& image, const FeatureExtractor& extractor) {
  FeatureVector f{extractor.features(image), extractor.id()};
  if (f.values.size() != extractor.dimension()) throw ShapeMismatch("extract_features: unexpected dimension");
  double norm = 0.0;
  for (double x : f.values) {
    if (!std::isfinite(x)) throw NonFiniteValue("extract_features: non-finite feature");
    norm += x * x;
  }
  if (!(norm > 0.0)) throw ZeroNorm("extract_features: zero-norm feature vector");
  return f;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeMismatch("cosine_similarity: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw ZeroNorm("cosine_similarity: zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
  return cosine_similarity(std::span<const double>(a.values), std::span<const double>(b.values));
}

// ---------------------------------------------------------------------------
// Quality report

enum class Verdict { kept, too_similar, too_dissimilar };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::kept: return "kept";
    case Verdict::too_similar: return "too_similar";
    case Verdict::too_dissimilar: return "too_dissimilar";
  }
  return "?";
}

inline Verdict parse_verdict(const std::string& s) {
  if (s == "kept") return Verdict::kept;
  if (s == "too_similar") return Verdict::too_similar;
  if (s == "too_dissimilar") return Verdict::too_dissimilar;
  throw FormatError("unknown verdict '" + s + "'");
}

inline Verdict classify(double similarity, double lo, double hi) {
  if (similarity < lo) return Verdict::too_dissimilar;
  if (similarity > hi) return Verdict::too_similar;
  return Verdict::kept;
}

struct QualityEntry {
  std::string pair_id;
  double similarity = 0.0;
  Verdict verdict = Verdict::kept;
  std::string nearest_reference;  // index of the maximizing reference, for audit
  int erosion_radius = 0;         // 0 when the mask was not eroded
  int erosion_iterations = 0;
};

struct QualityReport {
  std::vector<QualityEntry> entries;
  double lo = 0.5;
  double hi = 0.95;
  std::string extractor_id;

  std::size_t count(Verdict v) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [v](const QualityEntry& e) { return e.verdict == v; }));
  }
  std::size_t kept() const { return count(Verdict::kept); }
  std::size_t rejected() const { return count(Verdict::too_similar) + count(Verdict::too_dissimilar); }

  /// Every verdict agrees with (similarity, lo, hi).
  bool consistent() const {
    return std::all_of(entries.begin(), entries.end(),
                       [&](const QualityEntry& e) { return e.verdict == classify(e.similarity, lo, hi); });
  }
};

inline nlohmann::json to_json(const QualityReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"pair_id", e.pair_id},
                       {"similarity", e.similarity},
                       {"verdict", to_string(e.verdict)},
                       {"nearest_reference", e.nearest_reference},
                       {"erosion", {{"radius", e.erosion_radius}, {"iterations", e.erosion_iterations}}}});
  }
  return {{"lo", r.lo},
          {"hi", r.hi},
          {"extractor_id", r.extractor_id},
          {"counts",
           {{"kept", r.kept()},
            {"too_similar", r.count(Verdict::too_similar)},
            {"too_dissimilar", r.count(Verdict::too_dissimilar)}}},
          {"entries", entries}};
}

inline QualityReport quality_report_from_json(const nlohmann::json& j) {
  QualityReport r;
  r.lo = j.at("lo").get<double>();
  r.hi = j.at("hi").get<double>();
  r.extractor_id = j.at("extractor_id").get<std::string>();
  for (const auto& e : j.at("entries")) {
    QualityEntry q;
    q.pair_id = e.at("pair_id").get<std::string>();
    q.similarity = e.at("similarity").get<double>();
    q.verdict = parse_verdict(e.at("verdict").get<std::string>());
    q.nearest_reference = e.value("nearest_reference", std::string());
    if (e.contains("erosion")) {
      q.erosion_radius = e["erosion"].value("radius", 0);
      q.erosion_iterations = e["erosion"].value("iterations", 0);
    }
    r.entries.push_back(std::move(q));
  }
  return r;
}

struct FilterResult {
  std::vector<ImageMaskPair> kept;
  std::vector<ImageMaskPair> rejected;
  QualityReport report;
};

/// Scores each pair by its maximum cosine similarity to any reference and
/// keeps it iff lo <= score <= hi. Input order is preserved in both outputs.
inline FilterResult filter_pairs(std::span<const ImageMaskPair> pairs, std::span<const ImageTensor> references,
                                 double lo, double hi, const FeatureExtractor& extractor,
                                 std::span<const std::string> reference_ids = {}) {
  if (references.empty()) throw EmptyDataset("filter_pairs: no reference images");
  if (!(lo >= -1.0 && lo < hi && hi <= 1.0)) throw InvalidArgument("filter_pairs: need -1 <= lo < hi <= 1");
  std::vector<FeatureVector> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back(extract_features(r, extractor));

  FilterResult out;
  out.report.lo = lo;
  out.report.hi = hi;
  out.report.extractor_id = extractor.id();
  for (const auto& p : pairs) {
    const FeatureVector f = extract_features(p.image, extractor);
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const double s = cosine_similarity(f, refs[i]);
      if (s > best) {
        best = s;
        best_i = i;
      }
    }
    QualityEntry e;
    e.pair_id = p.id;
    e.similarity = best;
    e.verdict = classify(best, lo, hi);
    e.nearest_reference = best_i < reference_ids.size() ? reference_ids[best_i] : std::to_string(best_i);
    out.report.entries.push_back(e);
    (e.verdict == Verdict::kept ? out.kept : out.rejected).push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Erosion

namespace detail {

// One pass of a (2r+1)-wide minimum along rows (dy = 0) or columns, with zero
// padding beyond the border.
inline BinaryMask min_filter_1d(const BinaryMask& in, int radius, bool horizontal) {
  BinaryMask out(in.height, in.width);
  const int len = horizontal ? in.width : in.height;
  const int lines = horizontal ? in.height : in.width;
  std::vector<int> prefix(static_cast<std::size_t>(len) + 1);
  for (int l = 0; l < lines; ++l) {
    auto value = [&](int k) { return horizontal ? in.at(l, k) : in.at(k, l); };
    prefix[0] = 0;
    for (int k = 0; k < len; ++k) prefix[k + 1] = prefix[k] + (value(k) == 0 ? 1 : 0);
    for (int k = 0; k < len; ++k) {
      const int a = k - radius, b = k + radius;
      // any zero inside the window, or the window reaches past the border
      const bool keep = a >= 0 && b < len && prefix[b + 1] - prefix[a] == 0;
      (horizontal ? out.at(l, k) : out.at(k, l)) = keep ? 1 : 0;
    }
  }
  return out;
}

}  // namespace detail

/// Binary erosion by a (2r+1) x (2r+1) square, repeated `iterations` times;
/// pixels outside the canvas count as 0. The square is separable, so each
/// pass is a row minimum followed by a column minimum.
inline BinaryMask erode_mask(const BinaryMask& mask, int radius = 1, int iterations = 1) {
  if (radius < 1) throw InvalidArgument("erode_mask: radius must be >= 1");
  if (iterations < 1) throw InvalidArgument("erode_mask: iterations must be >= 1");
  BinaryMask out = mask;
  for (int i = 0; i < iterations; ++i) {
    out = detail::min_filter_1d(detail::min_filter_1d(out, radius, true), radius, false);
  }
  return out;
}

struct ErosionSettings {
  int radius = 1;
  int iterations = 1;
};

/// Erodes the masks of kept pairs and records the setting in the report.
/// Masks that would vanish keep their original form (flagged with radius 0).
inline void erode_kept(std::vector<ImageMaskPair>& kept, QualityReport& report, const ErosionSettings& s) {
  for (auto& p : kept) {
    BinaryMask eroded = erode_mask(p.mask, s.radius, s.iterations);
    auto it = std::find_if(report.entries.begin(), report.entries.end(),
                           [&](const QualityEntry& e) { return e.pair_id == p.id; });
    const bool applied = !eroded.empty_region();
    if (applied) p.mask = std::move(eroded);
    if (it != report.entries.end()) {
      it->erosion_radius = applied ? s.radius : 0;
      it->erosion_iterations = applied ? s.iterations : 0;
    }
  }
}

}  // namespace maskdiff
