// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "maskdiff/dataset.hpp"
#include "maskdiff/sampler.hpp"

using namespace maskdiff;

namespace {

ImageTensor random_image(std::mt19937_64& rng, int c, int h, int w) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  ImageTensor t(c, h, w);
  for (auto& v : t.values) v = u(rng);
  return t;
}

BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double p = 0.5) {
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (auto& v : m.values) v = b(rng) ? 1 : 0;
  return m;
}

// Randomly initialized network with a perturbed head so predictions are not
// identically zero.
Checkpoint noisy_model(Conditioning cond, int channels = 1, std::uint64_t seed = 1) {
  DenoiserSpec s;
  s.levels = 2;
  s.channel_widths = {4, 8};
  s.conditioning = cond;
  s.timestep_embedding_dim = 8;
  s.input_channels = s.output_channels = channels;
  Checkpoint ck = build_denoiser(s, seed, ScheduleParams{12, 1e-4, 0.05}, "test");
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<float> n(0.0f, 0.05f);
  for (auto& w : ck.weights) w += n(rng);
  if (cond == Conditioning::trigger_token) ck.token = make_trigger_token("zkx", 8, seed);
  return ck;
}

}  // namespace

TEST(PreserveBackground, TerminalStepReturnsBackground) {
  std::mt19937_64 rng(1);
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto bg = random_image(rng, 3, 5, 5);
  EXPECT_EQ(preserve_background(bg, -1, s, random_image(rng, 3, 5, 5)), bg);
}

TEST(PreserveBackground, ZeroNoiseHalvesAtQuarterAlphaBar) {
  std::mt19937_64 rng(2);
  const auto s = make_schedule(1, 0.75, 0.75);
  const auto bg = random_image(rng, 1, 4, 4);
  const auto out = preserve_background(bg, 0, s, ImageTensor(1, 4, 4));
  for (std::size_t i = 0; i < bg.size(); ++i) EXPECT_EQ(out.values[i], 0.5f * bg.values[i]);
}

TEST(PreserveBackground, MatchesClosedForm) {
  std::mt19937_64 rng(3);
  const auto s = make_schedule(200, 1e-4, 0.02);
  const auto bg = random_image(rng, 2, 6, 6);
  const auto eps = random_image(rng, 2, 6, 6);
  for (int t : {37, 100, 163}) {
    double abar = 1.0;
    for (int k = 0; k <= t; ++k) abar *= 1.0 - (1e-4 + (0.02 - 1e-4) * k / 199.0);
    const auto out = preserve_background(bg, t, s, eps);
    for (std::size_t i = 0; i < bg.size(); ++i) {
      EXPECT_NEAR(out.values[i], std::sqrt(abar) * bg.values[i] + std::sqrt(1.0 - abar) * eps.values[i], 1e-6);
    }
  }
}

TEST(BlendStep, FullMaskIsPlainStep) {
  std::mt19937_64 rng(4);
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto x = random_image(rng, 2, 4, 4), e = random_image(rng, 2, 4, 4), p = random_image(rng, 2, 4, 4);
  const auto z = random_image(rng, 2, 4, 4);
  EXPECT_EQ(blend_step(x, e, BinaryMask(4, 4, 1), p, 6, s), ddpm_step(x, e, 6, s));
  EXPECT_EQ(blend_step(x, e, BinaryMask(4, 4, 1), p, 6, s, &z), ddpm_step(x, e, 6, s, &z));
}

TEST(BlendStep, EmptyMaskIsPreserved) {
  std::mt19937_64 rng(5);
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto x = random_image(rng, 1, 4, 4), e = random_image(rng, 1, 4, 4), p = random_image(rng, 1, 4, 4);
  EXPECT_EQ(blend_step(x, e, BinaryMask(4, 4, 0), p, 6, s), p);
}

// Per-pixel select between the two branch values, each computed here from
// the closed-form update.
TEST(BlendStep, MixedMaskMatchesPerPixelSelect) {
  std::mt19937_64 rng(6);
  const auto s = make_schedule(10, 1e-4, 0.02);
  auto check = [&](const BinaryMask& m, int channels, bool noisy) {
    const int h = m.height, w = m.width;
    const auto x = random_image(rng, channels, h, w), e = random_image(rng, channels, h, w);
    const auto p = random_image(rng, channels, h, w), z = random_image(rng, channels, h, w);
    const int t = 7;
    const auto out = blend_step(x, e, m, p, t, s, noisy ? &z : nullptr);
    for (int c = 0; c < channels; ++c) {
      for (int yy = 0; yy < h; ++yy) {
        for (int xx = 0; xx < w; ++xx) {
          double step = (x.at(c, yy, xx) - s.betas[t] / std::sqrt(1.0 - s.alpha_bars[t]) * e.at(c, yy, xx)) /
                        std::sqrt(s.alphas[t]);
          if (noisy) step += std::sqrt(s.betas[t]) * z.at(c, yy, xx);
          const float expected = m.at(yy, xx) ? static_cast<float>(step) : p.at(c, yy, xx);
          EXPECT_EQ(out.at(c, yy, xx), expected);
        }
      }
    }
  };
  BinaryMask two(2, 2);
  two.values = {1, 0, 0, 1};
  check(two, 1, false);
  for (int i = 0; i < 20; ++i) check(random_mask(rng, 5, 7), 1 + i % 3, i % 2 == 1);
}

TEST(BlendStep, RejectsShapeMismatch) {
  const auto s = make_schedule(10, 1e-4, 0.02);
  const ImageTensor a(1, 4, 4);
  EXPECT_THROW(blend_step(a, a, BinaryMask(4, 5), a, 0, s), ShapeMismatch);
  EXPECT_THROW(blend_step(a, a, BinaryMask(4, 4), ImageTensor(1, 4, 5), 0, s), ShapeMismatch);
}

TEST(Generate, EmptyMaskReturnsBackground) {
  std::mt19937_64 rng(7);
  const auto model = noisy_model(Conditioning::trigger_token);
  const auto bg = random_image(rng, 1, 8, 8);
  const auto out = generate({bg, BinaryMask(8, 8), &model, std::nullopt, 3, true}, make_schedule(model.schedule));
  EXPECT_EQ(out.image, bg);
  EXPECT_EQ(out.mask, BinaryMask(8, 8));
}

TEST(Generate, BackgroundPreservedForRandomMasks) {
  std::mt19937_64 rng(8);
  const auto model = noisy_model(Conditioning::trigger_token, 3);
  const auto sched = make_schedule(model.schedule);
  for (int i = 0; i < 50; ++i) {
    const auto bg = random_image(rng, 3, 8, 8);
    const auto m = random_mask(rng, 8, 8, 0.1 + 0.016 * i);
    const auto out = generate({bg, m, &model, std::nullopt, 100u + i, i % 2 == 0}, sched);
    EXPECT_EQ(out.mask, m);  // pass-through
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
          if (!m.at(y, x)) ASSERT_EQ(out.image.at(c, y, x), bg.at(c, y, x));
        }
      }
    }
  }
}

TEST(Generate, DeterministicPerSeed) {
  std::mt19937_64 rng(9);
  const auto model = noisy_model(Conditioning::trigger_token);
  const auto sched = make_schedule(model.schedule);
  const auto bg = random_image(rng, 1, 8, 8);
  const auto m = random_mask(rng, 8, 8);
  for (bool stochastic : {false, true}) {
    const GuidanceRequest r{bg, m, &model, std::nullopt, 5, stochastic};
    EXPECT_EQ(generate(r, sched).image, generate(r, sched).image);
  }
  const auto a = generate({bg, m, &model, std::nullopt, 5, true}, sched).image;
  const auto b = generate({bg, m, &model, std::nullopt, 6, true}, sched).image;
  EXPECT_NE(a, b);
}

// A full mask leaves nothing to preserve: the run is ancestral sampling. The
// loop below replays the documented draw order (x_T, then one tensor per step).
TEST(Generate, FullMaskIsPlainAncestralSampling) {
  const auto model = noisy_model(Conditioning::none);
  const auto sched = make_schedule(model.schedule);
  const ImageTensor bg(1, 8, 8, 0.3f);
  const std::uint64_t seed = 42;
  const auto out = generate({bg, BinaryMask(8, 8, 1), &model, std::nullopt, seed, true}, sched);

  Rng rng(seed);
  ImageTensor x = gaussian_like(rng, 1, 8, 8);
  const Denoiser net(model);
  for (int t = sched.steps() - 1; t >= 0; --t) {
    const ImageTensor z = gaussian_like(rng, 1, 8, 8);
    x = ddpm_step(x, net.predict(x, t, nullptr), t, sched, &z);
  }
  EXPECT_EQ(out.image, x);
}

TEST(Generate, ObserverSeesDecreasingFiniteSteps) {
  std::mt19937_64 rng(10);
  const auto model = noisy_model(Conditioning::trigger_token);
  const auto sched = make_schedule(model.schedule);
  const auto bg = random_image(rng, 1, 8, 8);
  std::vector<int> seen;
  generate({bg, random_mask(rng, 8, 8), &model, std::nullopt, 1, true}, sched,
           [&](std::size_t, const SamplerState& st) {
             seen.push_back(st.t);
             EXPECT_TRUE(st.x_t->all_finite());
             ASSERT_NE(st.x_prev_source, nullptr);
             if (st.t == 0) EXPECT_EQ(*st.x_prev_source, bg);
           });
  ASSERT_EQ(seen.size(), static_cast<std::size_t>(sched.steps()));
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], sched.steps() - 1 - static_cast<int>(i));
}

TEST(Generate, ExplicitTokenOverridesTheCheckpointToken) {
  std::mt19937_64 rng(11);
  const auto model = noisy_model(Conditioning::trigger_token);
  const auto sched = make_schedule(model.schedule);
  const auto bg = random_image(rng, 1, 8, 8);
  const auto m = random_mask(rng, 8, 8);
  const auto same = generate({bg, m, &model, model.token, 2, false}, sched);
  EXPECT_EQ(same.image, generate({bg, m, &model, std::nullopt, 2, false}, sched).image);
  const auto other = generate({bg, m, &model, make_trigger_token("qwv", 8, 77), 2, false}, sched);
  EXPECT_NE(other.image, same.image);
}

TEST(Generate, RejectsInvalidRequests) {
  const auto cond = noisy_model(Conditioning::trigger_token);
  const auto plain = noisy_model(Conditioning::none);
  const auto sched = make_schedule(cond.schedule);
  const ImageTensor bg(1, 8, 8);
  EXPECT_THROW(generate({bg, BinaryMask(8, 4), &cond, std::nullopt, 1, true}, sched), ShapeMismatch);
  EXPECT_THROW(generate({bg, BinaryMask(8, 8), nullptr, std::nullopt, 1, true}, sched), InvalidArgument);
  EXPECT_THROW(generate({bg, BinaryMask(8, 8), &cond, make_trigger_token("zkx", 4, 1), 1, true}, sched),
               ShapeMismatch);
  EXPECT_THROW(generate({bg, BinaryMask(8, 8), &plain, make_trigger_token("zkx", 8, 1), 1, true}, sched),
               InvalidArgument);
  auto no_token = cond;
  no_token.token.reset();
  EXPECT_THROW(generate({bg, BinaryMask(8, 8), &no_token, std::nullopt, 1, true}, sched), InvalidArgument);
  EXPECT_THROW(generate({ImageTensor(3, 8, 8), BinaryMask(8, 8), &cond, std::nullopt, 1, true}, sched),
               ShapeMismatch);
  const GuidanceRequest mixed[] = {{bg, BinaryMask(8, 8), &cond, std::nullopt, 1, true},
                                   {bg, BinaryMask(8, 8), &plain, std::nullopt, 1, true}};
  EXPECT_THROW(generate_batch(mixed, sched), InvalidArgument);
}

TEST(Generate, DivergenceIsReported) {
  auto model = noisy_model(Conditioning::none);
  for (auto& w : model.weights) w = 1e30f;
  const auto sched = make_schedule(model.schedule);
  EXPECT_THROW(generate({ImageTensor(1, 8, 8), BinaryMask(8, 8, 1), &model, std::nullopt, 1, true}, sched),
               NonFiniteValue);
}

TEST(RepairToHealthy, DelegatesWithTheOriginalMask) {
  std::mt19937_64 rng(12);
  const auto model = noisy_model(Conditioning::trigger_token);
  const auto sched = make_schedule(model.schedule);
  const auto img = random_image(rng, 1, 8, 8);
  EXPECT_EQ(repair_to_healthy(img, BinaryMask(8, 8), model, std::nullopt, 4, sched), img);
  const auto m = random_mask(rng, 8, 8);
  const auto out = repair_to_healthy(img, m, model, std::nullopt, 4, sched);
  EXPECT_EQ(out, generate({img, m, &model, std::nullopt, 4, true}, sched).image);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m.values[i]) EXPECT_EQ(out.values[i], img.values[i]);
  }
}

TEST(GeneratedPairs, DiskRoundTrip) {
  std::mt19937_64 rng(13);
  std::vector<ImageMaskPair> pairs;
  for (int i = 0; i < 3; ++i) {
    ImageMaskPair p;
    p.id = "gen" + std::to_string(i);
    p.image = random_image(rng, i == 1 ? 3 : 1, 8, 6);
    quantize_8bit(p.image);
    p.mask = random_mask(rng, 8, 6);
    p.meta = {{"seed", std::to_string(1000 + i)}, {"model_id", "lesion"}, {"mask_id", "m"}, {"background_id", "b"}};
    pairs.push_back(p);
  }
  const auto dir = std::filesystem::temp_directory_path() / "maskdiff_pairs_rt";
  std::filesystem::remove_all(dir);
  write_pairs(dir, pairs);
  const auto back = read_pairs(dir);
  ASSERT_EQ(back.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(back[i].id, pairs[i].id);
    EXPECT_EQ(back[i].image, pairs[i].image);
    EXPECT_EQ(back[i].mask, pairs[i].mask);
    EXPECT_EQ(back[i].meta, pairs[i].meta);
  }
  std::ifstream jl(dir / "pairs.jsonl");
  std::string line;
  std::getline(jl, line);
  const auto j = nlohmann::json::parse(line);
  for (const char* k : {"pair_id", "seed", "model_id", "mask_id", "background_id"}) EXPECT_TRUE(j.contains(k)) << k;
  std::filesystem::remove_all(dir);
}
