// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "maskdiff/mask_generator.hpp"

using namespace maskdiff;

namespace {

BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double p) {
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (auto& v : m.values) v = b(rng) ? 1 : 0;
  return m;
}

BinaryMask ellipse(int size, double cy, double cx, double ry, double rx) {
  BinaryMask m(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
      m.at(y, x) = dy * dy + dx * dx <= 1.0;
    }
  }
  return m;
}

MaskModelConfig tiny_config() {
  MaskModelConfig c;
  c.iterations = 3;
  c.batch_size = 2;
  c.image_size = 8;
  c.schedule = ScheduleParams{6, 1e-4, 0.05};
  c.seed = 4;
  return c;
}

}  // namespace

TEST(MaskModel, FixedArchitecture) {
  const auto s = mask_model_spec();
  EXPECT_EQ(s.levels, 4);
  EXPECT_EQ(s.channel_widths, (std::vector<int>{64, 128, 256, 512}));
  EXPECT_EQ(s.input_channels, 1);
  EXPECT_EQ(s.conditioning, Conditioning::none);
  MaskModelConfig c;
  c.spec.channel_widths = {32, 64, 128, 256};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = MaskModelConfig{};
  c.image_size = 12;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(MaskModel, TrainingIsDeterministic) {
  const std::vector<BinaryMask> masks = {ellipse(8, 4, 4, 2, 3), ellipse(8, 3, 5, 2, 2)};
  const auto a = train_mask_model(masks, tiny_config());
  const auto b = train_mask_model(masks, tiny_config());
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(a.loss_trace.size(), 3u);
  EXPECT_EQ(a.checkpoint.image_size, 8);
  EXPECT_EQ(a.checkpoint.spec.channel_widths, (std::vector<int>{64, 128, 256, 512}));
}

TEST(MaskModel, TrainingRejectsBadInputs) {
  EXPECT_THROW(train_mask_model({}, tiny_config()), EmptyDataset);
  const std::vector<BinaryMask> mixed = {BinaryMask(8, 8), BinaryMask(16, 16)};
  EXPECT_THROW(train_mask_model(mixed, tiny_config()), ShapeMismatch);
}

TEST(Threshold, BelowThresholdIsEmptyAndRejected) {
  const ImageTensor raw(1, 8, 8, 0.4f);
  EXPECT_TRUE(threshold_mask(raw, 0.5).empty_region());
  MaskSample s;
  EXPECT_FALSE(accept_mask(raw, 0.5, 0.01, 0.6, &s));
  EXPECT_EQ(s.area_fraction, 0.0);
}

TEST(Threshold, IdempotentAndBinary) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int i = 0; i < 50; ++i) {
    ImageTensor raw(1, 9, 7);
    for (auto& v : raw.values) v = u(rng);
    const double thr = 0.05 + 0.9 * u(rng);
    const auto once = threshold_mask(raw, thr);
    EXPECT_TRUE(once.is_binary());
    EXPECT_EQ(threshold_mask(once, thr), once);
    for (std::size_t k = 0; k < raw.size(); ++k) EXPECT_EQ(once.values[k], raw.values[k] >= thr ? 1 : 0);
  }
}

TEST(Threshold, RescaleMapsModelRangeToUnit) {
  ImageTensor raw(1, 1, 4);
  raw.values = {-3.0f, -1.0f, 0.0f, 1.5f};
  EXPECT_EQ(rescale_unit(raw).values, (std::vector<float>{0.0f, 0.0f, 0.5f, 1.0f}));
}

TEST(AreaGate, Boundaries) {
  ImageTensor raw(1, 10, 10, 0.0f);
  for (int i = 0; i < 30; ++i) raw.values[i] = 1.0f;
  EXPECT_TRUE(accept_mask(raw, 0.5, 0.3, 0.6));
  EXPECT_TRUE(accept_mask(raw, 0.5, 0.1, 0.3));
  EXPECT_FALSE(accept_mask(raw, 0.5, 0.31, 0.6));
  EXPECT_FALSE(accept_mask(raw, 0.5, 0.0, 0.29));
}

TEST(SampleMasks, AcceptedSamplesRespectTheGateAndAreDeterministic) {
  const std::vector<BinaryMask> masks = {ellipse(8, 4, 4, 2, 3)};
  const auto model = train_mask_model(masks, tiny_config()).checkpoint;
  const auto sched = make_schedule(model.schedule);
  MaskSamplingOptions opt;
  opt.min_area = 0.0;
  opt.max_area = 1.0;
  opt.batch = 3;
  const auto a = sample_masks(model, 5, 9, sched, opt);
  const auto b = sample_masks(model, 5, 9, sched, opt);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].binary, b[i].binary);
    EXPECT_EQ(a[i].raw, b[i].raw);
    EXPECT_EQ(a[i].binary, threshold_mask(a[i].raw, opt.threshold));
    EXPECT_DOUBLE_EQ(a[i].area_fraction, a[i].binary.area_fraction());
    EXPECT_EQ(a[i].seed, derive_seed(9, a[i].draw));
    for (float v : a[i].raw.values) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  // chunking does not change which draws are accepted
  opt.batch = 1;
  const auto c = sample_masks(model, 5, 9, sched, opt);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].draw, c[i].draw);
}

TEST(SampleMasks, BudgetExhaustionReportsRate) {
  const std::vector<BinaryMask> masks = {ellipse(8, 4, 4, 2, 3)};
  const auto model = train_mask_model(masks, tiny_config()).checkpoint;
  MaskSamplingOptions opt;
  opt.min_area = 0.999;  // essentially unattainable
  opt.max_area = 1.0;
  try {
    sample_masks(model, 2, 1, make_schedule(model.schedule), opt);
    FAIL() << "expected BudgetExhausted";
  } catch (const BudgetExhausted& e) {
    EXPECT_GE(e.acceptance_rate(), 0.0);
    EXPECT_LT(e.acceptance_rate(), 1.0);
    EXPECT_NE(std::string(e.what()).find("20 draws"), std::string::npos) << e.what();
  }
}

TEST(SampleMasks, RejectsBadArguments) {
  const auto model = train_mask_model(std::vector<BinaryMask>{BinaryMask(8, 8, 1)}, tiny_config()).checkpoint;
  const auto sched = make_schedule(model.schedule);
  EXPECT_THROW(sample_masks(model, 0, 1, sched), InvalidArgument);
  MaskSamplingOptions opt;
  opt.threshold = 1.0;
  EXPECT_THROW(sample_masks(model, 1, 1, sched, opt), InvalidArgument);
  opt = {};
  opt.min_area = 0.7;
  EXPECT_THROW(sample_masks(model, 1, 1, sched, opt), InvalidArgument);
  auto unsized = model;
  unsized.image_size = 0;
  EXPECT_THROW(sample_masks(unsized, 1, 1, sched), InvalidArgument);
}

TEST(ClassicAugment, FlipExamples) {
  BinaryMask m(2, 2);
  m.values = {1, 0, 0, 0};
  BinaryMask expected(2, 2);
  expected.values = {0, 1, 0, 0};
  const MaskOp h[] = {MaskOp::flip_h()};
  EXPECT_EQ(classic_augment(m, h), expected);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto r = random_mask(rng, 3 + i, 5 + i % 4, 0.5);
    const MaskOp hh[] = {MaskOp::flip_h(), MaskOp::flip_h()};
    const MaskOp vv[] = {MaskOp::flip_v(), MaskOp::flip_v()};
    EXPECT_EQ(classic_augment(r, hh), r);
    EXPECT_EQ(classic_augment(r, vv), r);
    for (int y = 0; y < r.height; ++y) {
      for (int x = 0; x < r.width; ++x) EXPECT_EQ(flip_vertical(r).at(y, x), r.at(r.height - 1 - y, x));
    }
  }
}

TEST(ClassicAugment, ErodeIsSubsetAndDelegates) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto r = random_mask(rng, 12, 12, 0.8);
    const MaskOp ops[] = {MaskOp::erode(1)};
    const auto e = classic_augment(r, ops);
    EXPECT_EQ(e, erode_mask(r, 1, 1));
    for (std::size_t k = 0; k < r.size(); ++k) EXPECT_LE(e.values[k], r.values[k]);
  }
}

TEST(Upsample, NearestKeepsMasksBinary) {
  std::mt19937_64 rng(4);
  const auto m = random_mask(rng, 8, 8, 0.5);
  const auto up = upsample_mask(m, 32);
  EXPECT_TRUE(up.is_binary());
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) EXPECT_EQ(up.at(y, x), m.at(y / 4, x / 4));
  }
}
