// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "maskdiff/error.hpp"
#include "maskdiff/nn/unet.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/tensor.hpp"
#include "maskdiff/token.hpp"

namespace maskdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Trained (or freshly initialized) network weights plus everything needed to
/// rebuild and query the network. Immutable once constructed by training.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string model_id;
  DenoiserSpec spec;
  std::uint64_t seed = 0;
  ScheduleParams schedule;
  int image_size = 0;  // training resolution; 0 when not trained yet
  AlignedVector<float> weights;
  std::optional<TriggerToken> token;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline nlohmann::json spec_to_json(const DenoiserSpec& s) {
  return {{"levels", s.levels},
          {"channel_widths", s.channel_widths},
          {"conditioning", to_string(s.conditioning)},
          {"timestep_embedding_dim", s.timestep_embedding_dim},
          {"input_channels", s.input_channels},
          {"output_channels", s.output_channels}};
}

inline DenoiserSpec spec_from_json(const nlohmann::json& j) {
  DenoiserSpec s;
  s.levels = j.at("levels").get<int>();
  s.channel_widths = j.at("channel_widths").get<std::vector<int>>();
  s.conditioning = parse_conditioning(j.at("conditioning").get<std::string>());
  s.timestep_embedding_dim = j.at("timestep_embedding_dim").get<int>();
  s.input_channels = j.at("input_channels").get<int>();
  s.output_channels = j.at("output_channels").get<int>();
  return s;
}

inline nlohmann::json schedule_to_json(const ScheduleParams& p) {
  return {{"steps", p.steps},
          {"beta_start", p.beta_start},
          {"beta_end", p.beta_end},
          {"kind", to_string(p.kind)},
          {"weight_mode", to_string(p.weight_mode)}};
}

inline ScheduleParams schedule_from_json(const nlohmann::json& j) {
  ScheduleParams p;
  p.steps = j.at("steps").get<int>();
  p.beta_start = j.at("beta_start").get<double>();
  p.beta_end = j.at("beta_end").get<double>();
  p.kind = parse_schedule_kind(j.value("kind", std::string("linear")));
  p.weight_mode = parse_weight_mode(j.value("weight_mode", std::string("uniform")));
  return p;
}

/// Instantiates the U-Net described by `spec` with seeded random weights.
inline Checkpoint build_denoiser(const DenoiserSpec& spec, std::uint64_t seed, ScheduleParams schedule = {},
                                 std::string model_id = "denoiser") {
  spec.validate();
  nn::UNet<float> net(spec);
  Checkpoint ck;
  ck.model_id = std::move(model_id);
  ck.spec = spec;
  ck.seed = seed;
  ck.schedule = schedule;
  ck.weights.resize(net.parameter_count());
  net.initialize(ck.weights, seed);
  return ck;
}

namespace detail {
inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'S', 'K', 'D', 'I', 'F', 'F'};

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U take(std::string_view& in) {
  if (in.size() < sizeof(U)) throw FormatError("checkpoint: truncated data");
  U value;
  std::memcpy(&value, in.data(), sizeof(U));
  in.remove_prefix(sizeof(U));
  return value;
}

inline void put_floats(std::string& out, std::span<const float> v) {
  put<std::uint64_t>(out, v.size());
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
}

inline std::vector<float> take_floats(std::string_view& in) {
  const auto n = take<std::uint64_t>(in);
  if (in.size() / sizeof(float) < n) throw FormatError("checkpoint: truncated float array");
  std::vector<float> v(static_cast<std::size_t>(n));
  std::memcpy(v.data(), in.data(), v.size() * sizeof(float));
  in.remove_prefix(v.size() * sizeof(float));
  return v;
}
}  // namespace detail

/// Layout: 8-byte magic, u32 version, u32 header length, JSON header, then
/// length-prefixed float32 weights, then the length-prefixed token embedding
/// (length 0 when there is no token).
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header = {{"model_id", ck.model_id},
                           {"spec", spec_to_json(ck.spec)},
                           {"seed", ck.seed},
                           {"schedule", schedule_to_json(ck.schedule)},
                           {"image_size", ck.image_size},
                           {"token", ck.token ? nlohmann::json(ck.token->text) : nlohmann::json(nullptr)}};
  const std::string text = header.dump();
  std::string out(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::put<std::uint32_t>(out, Checkpoint::kFormatVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  detail::put_floats(out, ck.weights);
  detail::put_floats(out, ck.token ? std::span<const float>(ck.token->embedding) : std::span<const float>());
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view in) {
  if (in.size() < sizeof(detail::kCheckpointMagic) ||
      std::memcmp(in.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  in.remove_prefix(sizeof(detail::kCheckpointMagic));
  const auto version = detail::take<std::uint32_t>(in);
  if (version != Checkpoint::kFormatVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto header_len = detail::take<std::uint32_t>(in);
  if (in.size() < header_len) throw FormatError("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(in.substr(0, header_len));
  in.remove_prefix(header_len);

  Checkpoint ck;
  ck.model_id = header.at("model_id").get<std::string>();
  ck.spec = spec_from_json(header.at("spec"));
  ck.seed = header.at("seed").get<std::uint64_t>();
  ck.schedule = schedule_from_json(header.at("schedule"));
  ck.image_size = header.value("image_size", 0);
  {
    const auto w = detail::take_floats(in);
    ck.weights.assign(w.begin(), w.end());
  }
  auto embedding = detail::take_floats(in);
  if (!header.at("token").is_null()) {
    ck.token = TriggerToken{header.at("token").get<std::string>(), std::move(embedding)};
  }
  if (!in.empty()) throw FormatError("checkpoint: trailing bytes");
  ck.spec.validate();
  if (ck.weights.size() != nn::UNet<float>(ck.spec).parameter_count()) {
    throw FormatError("checkpoint: weight count does not match the architecture");
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

// ---------------------------------------------------------------------------
// Batch packing between per-image tensors and the network's (C, N, H, W) layout.

inline nn::Activation<float> pack_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw InvalidArgument("pack_batch: empty batch");
  const auto& first = images.front();
  nn::Activation<float> a(first.channels, static_cast<int>(images.size()), first.height, first.width);
  for (std::size_t n = 0; n < images.size(); ++n) {
    require_same_shape(first, images[n], "pack_batch");
    for (int c = 0; c < first.channels; ++c) {
      std::memcpy(a.plane_ptr(c, static_cast<int>(n)), images[n].values.data() + c * first.plane_size(),
                  first.plane_size() * sizeof(float));
    }
  }
  return a;
}

inline std::vector<ImageTensor> unpack_batch(const nn::Activation<float>& a) {
  std::vector<ImageTensor> out;
  out.reserve(static_cast<std::size_t>(a.batch));
  for (int n = 0; n < a.batch; ++n) {
    ImageTensor img(a.channels, a.height, a.width);
    for (int c = 0; c < a.channels; ++c) {
      std::memcpy(img.values.data() + c * img.plane_size(), a.plane_ptr(c, n), img.plane_size() * sizeof(float));
    }
    out.push_back(std::move(img));
  }
  return out;
}

/// Read-only evaluator over a checkpoint. Cheap to construct; reentrant.
class Denoiser {
 public:
  explicit Denoiser(const Checkpoint& ck) : ck_(&ck), net_(ck.spec) {
    if (ck.weights.size() != net_.parameter_count()) {
      throw ShapeMismatch("Denoiser: checkpoint weights do not match its spec");
    }
  }

  const Checkpoint& checkpoint() const noexcept { return *ck_; }

  /// One network output per input. `condition` must be the checkpoint's token
  /// embedding (or nullptr for unconditioned models).
  std::vector<ImageTensor> predict(std::span<const ImageTensor> xs, std::span<const int> timesteps,
                                   const std::vector<float>* condition) const {
    const nn::Activation<float> x = pack_batch(xs);
    const auto y = net_.forward(ck_->weights, x, timesteps, condition ? condition->data() : nullptr, nullptr);
    return unpack_batch(y);
  }

  ImageTensor predict(const ImageTensor& x, int t, const std::vector<float>* condition) const {
    const int ts[1] = {t};
    return std::move(predict(std::span<const ImageTensor>(&x, 1), ts, condition).front());
  }

 private:
  const Checkpoint* ck_;
  nn::UNet<float> net_;
};

}  // namespace maskdiff
