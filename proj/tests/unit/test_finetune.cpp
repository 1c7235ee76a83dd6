// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "maskdiff/dataset.hpp"
#include "maskdiff/finetune.hpp"

using namespace maskdiff;

namespace {

ImageTensor tensor2x2(float a, float b, float c, float d) {
  ImageTensor t(1, 2, 2);
  t.values = {a, b, c, d};
  return t;
}

BinaryMask mask2x2(int a, int b, int c, int d) {
  BinaryMask m(2, 2);
  m.values = {std::uint8_t(a), std::uint8_t(b), std::uint8_t(c), std::uint8_t(d)};
  return m;
}

BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double p = 0.5) {
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (auto& v : m.values) v = b(rng) ? 1 : 0;
  return m;
}

ImageTensor random_image(std::mt19937_64& rng, int c, int h, int w) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  ImageTensor t(c, h, w);
  for (auto& v : t.values) v = u(rng);
  return t;
}

// Independent reference: weight times the mean squared error over masked
// pixels in every channel.
double reference_loss(const ImageTensor& x0, const BinaryMask& m, const ImageTensor& x0_hat, double w) {
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < x0.channels; ++c) {
    for (int y = 0; y < x0.height; ++y) {
      for (int x = 0; x < x0.width; ++x) {
        if (!m.at(y, x)) continue;
        const double d = double(x0_hat.at(c, y, x)) - x0.at(c, y, x);
        sum += d * d;
        ++n;
      }
    }
  }
  return n == 0 ? 0.0 : w * sum / n;
}

DenoiserSpec tiny_spec() {
  DenoiserSpec s;
  s.levels = 2;
  s.channel_widths = {4, 8};
  s.conditioning = Conditioning::trigger_token;
  s.timestep_embedding_dim = 8;
  return s;
}

FinetuneConfig tiny_config() {
  FinetuneConfig c;
  c.iterations = 12;
  c.batch_size = 2;
  c.image_size = 16;
  c.schedule = ScheduleParams{20, 1e-4, 0.02};
  c.seed = 99;
  return c;
}

std::vector<ImageMaskPair> tiny_pairs() {
  ToyDatasetOptions opt;
  opt.image_size = 16;
  return synth_toy_dataset(3, 10, opt).pairs;
}

}  // namespace

TEST(MaskedLoss, ZeroMaskGivesZero) {
  std::mt19937_64 rng(1);
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto a = random_image(rng, 1, 5, 5), b = random_image(rng, 1, 5, 5);
  EXPECT_EQ(masked_loss(a, BinaryMask(5, 5), b, 3, s), 0.0);
}

TEST(MaskedLoss, PerfectPredictionGivesZero) {
  std::mt19937_64 rng(2);
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto a = random_image(rng, 3, 6, 4);
  EXPECT_EQ(masked_loss(a, random_mask(rng, 6, 4), a, 0, s), 0.0);
}

TEST(MaskedLoss, HandComputedTwoByTwo) {
  const auto s = make_schedule(10, 1e-4, 0.02);  // uniform weights
  const auto x0 = tensor2x2(1, 1, 1, 1);
  const auto x0_hat = tensor2x2(0, 1, 1, 1);
  const auto m = mask2x2(1, 1, 0, 0);
  // masked squared errors are {1, 0}
  EXPECT_DOUBLE_EQ(masked_loss(x0, m, x0_hat, 4, s), (1.0 + 0.0) / 2.0);
}

TEST(MaskedLoss, MatchesReferenceOnRandomInputs) {
  std::mt19937_64 rng(3);
  const auto s = make_schedule(50, 1e-4, 0.02, ScheduleKind::linear, WeightMode::snr);
  for (int trial = 0; trial < 30; ++trial) {
    const auto a = random_image(rng, 1 + trial % 3, 7, 9), b = random_image(rng, 1 + trial % 3, 7, 9);
    const auto m = random_mask(rng, 7, 9, 0.3);
    const int t = trial;
    EXPECT_NEAR(masked_loss(a, m, b, t, s), reference_loss(a, m, b, s.loss_weights[t]),
                1e-12 * std::max(1.0, s.loss_weights[t]));
  }
}

TEST(MaskedLoss, IgnoresPredictionsOutsideTheMask) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> big(0.0f, 100.0f);
  const auto s = make_schedule(10, 1e-4, 0.02);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x0 = random_image(rng, 2, 8, 8), x0_hat = random_image(rng, 2, 8, 8);
    const auto m = random_mask(rng, 8, 8);
    ImageTensor perturbed = x0_hat;
    for (int c = 0; c < 2; ++c) {
      for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
          if (!m.at(y, x)) perturbed.at(c, y, x) = big(rng);
        }
      }
    }
    EXPECT_LE(std::abs(masked_loss(x0, m, x0_hat, 2, s) - masked_loss(x0, m, perturbed, 2, s)), 1e-12);
  }
}

TEST(MaskedLoss, LinearInTimestepWeight) {
  std::mt19937_64 rng(5);
  const auto base = make_schedule(10, 1e-4, 0.02);
  const auto a = random_image(rng, 1, 6, 6), b = random_image(rng, 1, 6, 6);
  const auto m = random_mask(rng, 6, 6);
  const double l1 = masked_loss(a, m, b, 5, base);
  for (double w : {0.0, 0.5, 2.0, 17.25}) {
    NoiseSchedule s = base;
    s.loss_weights[5] = w;
    EXPECT_NEAR(masked_loss(a, m, b, 5, s), w * l1, 1e-12 * std::max(1.0, w));
  }
}

TEST(MaskedLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto x0 = random_image(rng, 2, 4, 4), x0_hat = random_image(rng, 2, 4, 4);
  const auto m = random_mask(rng, 4, 4);
  ImageTensor grad;
  masked_loss(x0, m, x0_hat, 1, s, &grad);
  for (std::size_t i = 0; i < x0_hat.size(); ++i) {
    ImageTensor up = x0_hat, down = x0_hat;
    const float h = 1e-2f;
    up.values[i] += h;
    down.values[i] -= h;
    const double numeric = (masked_loss(x0, m, up, 1, s) - masked_loss(x0, m, down, 1, s)) /
                           (double(up.values[i]) - double(down.values[i]));
    EXPECT_NEAR(grad.values[i], numeric, 1e-5);
  }
}

TEST(MaskedLoss, RejectsMisalignedInputs) {
  const auto s = make_schedule(10, 1e-4, 0.02);
  EXPECT_THROW(masked_loss(ImageTensor(1, 4, 4), BinaryMask(4, 4), ImageTensor(1, 4, 5), 0, s), ShapeMismatch);
  EXPECT_THROW(masked_loss(ImageTensor(1, 4, 4), BinaryMask(4, 3), ImageTensor(1, 4, 4), 0, s), ShapeMismatch);
}

TEST(InvertMask, Examples) {
  EXPECT_EQ(invert_mask(mask2x2(0, 1, 1, 0)), mask2x2(1, 0, 0, 1));
  EXPECT_EQ(invert_mask(BinaryMask(3, 3, 1)), BinaryMask(3, 3, 0));
}

TEST(InvertMask, Involution) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    const auto m = random_mask(rng, 1 + i % 9, 1 + i % 5);
    const auto inv = invert_mask(m);
    for (std::size_t k = 0; k < m.size(); ++k) EXPECT_EQ(inv.values[k], 1 - m.values[k]);
    EXPECT_EQ(invert_mask(inv), m);
  }
}

TEST(TriggerToken, ValidatesText) {
  EXPECT_NO_THROW(validate_token_text("zkx"));
  EXPECT_THROW(validate_token_text(""), InvalidArgument);
  EXPECT_THROW(validate_token_text("two words"), InvalidArgument);
  EXPECT_THROW(validate_token_text("Lesion"), InvalidArgument);
  EXPECT_THROW(make_trigger_token("zkx", 0, 1), InvalidArgument);
  EXPECT_EQ(make_trigger_token("zkx", 8, 1), make_trigger_token("zkx", 8, 1));
}

TEST(Finetune, DeterministicPerSeed) {
  const auto pairs = tiny_pairs();
  const auto base = build_denoiser(tiny_spec(), 1, tiny_config().schedule);
  const auto token = make_trigger_token("zkx", 8, 2);
  const auto a = finetune(pairs, base, token, tiny_config());
  const auto b = finetune(pairs, base, token, tiny_config());
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  auto other = tiny_config();
  other.seed = 100;
  EXPECT_NE(finetune(pairs, base, token, other).checkpoint.weights, a.checkpoint.weights);
}

TEST(Finetune, TraceAndCheckpointMetadata) {
  const auto pairs = tiny_pairs();
  const auto base = build_denoiser(tiny_spec(), 1, tiny_config().schedule);
  const auto token = make_trigger_token("zkx", 8, 2);
  for (MaskMode mode : {MaskMode::lesion, MaskMode::inverted}) {
    auto cfg = tiny_config();
    cfg.mask_mode = mode;
    const auto r = finetune(pairs, base, token, cfg);
    ASSERT_EQ(r.loss_trace.size(), static_cast<std::size_t>(cfg.iterations));
    for (double l : r.loss_trace) EXPECT_TRUE(std::isfinite(l) && l >= 0.0);
    EXPECT_EQ(r.checkpoint.image_size, 16);
    EXPECT_EQ(r.checkpoint.schedule, cfg.schedule);
    ASSERT_TRUE(r.checkpoint.token.has_value());
    EXPECT_EQ(r.checkpoint.token->text, "zkx");
    EXPECT_NE(r.checkpoint.token->embedding, token.embedding);  // the token is learned
    EXPECT_NE(r.checkpoint.weights, base.weights);              // nothing is frozen
    EXPECT_EQ(r.checkpoint.model_id, mode == MaskMode::lesion ? "lesion" : "background");
  }
}

TEST(Finetune, RejectsBadInputs) {
  const auto pairs = tiny_pairs();
  const auto base = build_denoiser(tiny_spec(), 1, tiny_config().schedule);
  const auto token = make_trigger_token("zkx", 8, 2);
  EXPECT_THROW(finetune({}, base, token, tiny_config()), EmptyDataset);
  auto wrong_size = tiny_config();
  wrong_size.image_size = 32;
  EXPECT_THROW(finetune(pairs, base, token, wrong_size), ShapeMismatch);
  EXPECT_THROW(finetune(pairs, base, make_trigger_token("zkx", 4, 2), tiny_config()), ShapeMismatch);
  auto plain = tiny_spec();
  plain.conditioning = Conditioning::none;
  EXPECT_THROW(finetune(pairs, build_denoiser(plain, 1), token, tiny_config()), InvalidArgument);
  auto bad = tiny_config();
  bad.iterations = 0;
  EXPECT_THROW(finetune(pairs, base, token, bad), InvalidArgument);
  bad = tiny_config();
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(LossTrace, CsvRoundTrip) {
  const std::vector<double> trace = {1.0, 0.5, 1.0 / 3.0, 1e-300, 12345.678901234567};
  const auto path = std::filesystem::temp_directory_path() / "maskdiff_trace.csv";
  write_loss_trace_csv(path, trace);
  EXPECT_EQ(read_loss_trace_csv(path), trace);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,loss");
  std::filesystem::remove(path);
}
