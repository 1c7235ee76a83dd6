// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "maskdiff/error.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

/// 8-bit interleaved raster as stored on disk.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline Raster read_png(const std::filesystem::path& path, int want_channels) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.string().c_str()) == 0) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  int channels = want_channels;
  if (channels == 0) channels = (image.format & PNG_FORMAT_FLAG_COLOR) != 0 ? 3 : 1;
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Raster r;
  r.width = static_cast<int>(image.width);
  r.height = static_cast<int>(image.height);
  r.channels = channels;
  r.pixels.resize(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr) == 0) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return r;
}

inline void write_png(const std::filesystem::path& path, const Raster& r) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(r.width);
  image.height = static_cast<png_uint_32>(r.height);
  image.format = r.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&image, path.string().c_str(), 0, r.pixels.data(), 0, nullptr) == 0) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

inline void skip_pnm_space(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline Raster read_pnm(const std::filesystem::path& path, int want_channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw IoError(path.string() + ": only binary PGM/PPM is supported");
  int w = 0, h = 0, maxval = 0;
  skip_pnm_space(in);
  in >> w;
  skip_pnm_space(in);
  in >> h;
  skip_pnm_space(in);
  in >> maxval;
  in.get();
  if (!in || w < 1 || h < 1 || maxval != 255) throw IoError(path.string() + ": unsupported PNM header");
  Raster r;
  r.width = w;
  r.height = h;
  r.channels = magic == "P6" ? 3 : 1;
  r.pixels.resize(static_cast<std::size_t>(w) * h * r.channels);
  in.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (!in) throw IoError(path.string() + ": truncated pixel data");
  if (want_channels != 0 && want_channels != r.channels) {
    Raster conv;
    conv.width = w;
    conv.height = h;
    conv.channels = want_channels;
    conv.pixels.resize(static_cast<std::size_t>(w) * h * want_channels);
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i) {
      if (want_channels == 1) {
        const auto* p = &r.pixels[i * 3];
        conv.pixels[i] = static_cast<std::uint8_t>(std::lround(0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]));
      } else {
        std::fill_n(&conv.pixels[i * 3], 3, r.pixels[i]);
      }
    }
    return conv;
  }
  return r;
}

inline void write_pnm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (r.channels == 3 ? "P6" : "P5") << '\n' << r.width << ' ' << r.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  const auto ext = detail::lower_extension(p);
  return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

/// Reads PNG or binary PGM/PPM. want_channels: 0 keeps the file's layout
/// (gray -> 1, color -> 3), otherwise converts to 1 or 3.
inline Raster read_raster(const std::filesystem::path& path, int want_channels = 0) {
  if (!std::filesystem::exists(path)) throw IoError("no such file " + path.string());
  const auto ext = detail::lower_extension(path);
  if (ext == ".png") return detail::read_png(path, want_channels);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return detail::read_pnm(path, want_channels);
  throw IoError("unsupported image format " + path.string());
}

inline void write_raster(const std::filesystem::path& path, const Raster& r) {
  const auto ext = detail::lower_extension(path);
  if (ext == ".png") return detail::write_png(path, r);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return detail::write_pnm(path, r);
  throw IoError("unsupported image format " + path.string());
}

/// 8-bit raster -> planar tensor in [-1, 1].
inline ImageTensor raster_to_tensor(const Raster& r) {
  ImageTensor t(r.channels, r.height, r.width);
  const std::size_t plane = t.plane_size();
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < r.channels; ++c) {
      t.values[c * plane + i] = static_cast<float>(r.pixels[i * r.channels + c]) / 127.5f - 1.0f;
    }
  }
  return t;
}

inline Raster tensor_to_raster(const ImageTensor& t) {
  if (t.channels != 1 && t.channels != 3) throw InvalidArgument("only 1- or 3-channel images can be saved");
  Raster r;
  r.width = t.width;
  r.height = t.height;
  r.channels = t.channels;
  r.pixels.resize(t.size());
  const std::size_t plane = t.plane_size();
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < t.channels; ++c) {
      const double v = std::clamp(static_cast<double>(t.values[c * plane + i]), -1.0, 1.0);
      r.pixels[i * t.channels + c] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
    }
  }
  return r;
}

inline ImageTensor load_image(const std::filesystem::path& path, int want_channels = 0) {
  return raster_to_tensor(read_raster(path, want_channels));
}

inline void save_image(const std::filesystem::path& path, const ImageTensor& image) {
  write_raster(path, tensor_to_raster(image));
}

/// Masks are read as grayscale and binarized at 128/255.
inline BinaryMask load_mask(const std::filesystem::path& path) {
  const Raster r = read_raster(path, 1);
  BinaryMask m(r.height, r.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = r.pixels[i] >= 128 ? 1 : 0;
  return m;
}

/// Stored as single-channel {0, 255}.
inline void save_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  Raster r;
  r.width = mask.width;
  r.height = mask.height;
  r.channels = 1;
  r.pixels.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) r.pixels[i] = mask.values[i] ? 255 : 0;
  write_raster(path, r);
}

}  // namespace maskdiff
