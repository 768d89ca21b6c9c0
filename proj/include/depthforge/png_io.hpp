#pragma once

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "depthforge/errors.hpp"
#include "depthforge/image.hpp"

namespace depthforge::io {

class PngError : public Error {
 public:
  using Error::Error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw PngError("cannot open " + path.string());
  return f;
}

// Decoded PNG normalized to 8 or 16 bit samples with 1 (gray) or 3 (rgb) channels.
struct RawPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::uint8_t> bytes;  // rows packed, 16-bit samples big-endian
};

inline RawPng read_raw(const std::filesystem::path& path, bool want_rgb) {
  FilePtr file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw PngError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw PngError("png_create_info_struct failed");
  }
  RawPng raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw PngError("malformed PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);

  const png_byte color_type = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (want_rgb) {
    if (depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
      png_set_gray_to_rgb(png);
    }
  } else if (color_type & PNG_COLOR_MASK_COLOR) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw PngError("expected a grayscale depth PNG: " + path.string());
  }
  png_read_update_info(png, info);

  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.channels = png_get_channels(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  raw.bytes.resize(row_bytes * static_cast<std::size_t>(raw.height));
  rows.resize(static_cast<std::size_t>(raw.height));
  for (int y = 0; y < raw.height; ++y) rows[static_cast<std::size_t>(y)] = raw.bytes.data() + row_bytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

inline void write_raw(const std::filesystem::path& path, int width, int height, int color_type,
                      int bit_depth, const std::vector<std::uint8_t>& bytes) {
  FilePtr file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw PngError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw PngError("png_create_info_struct failed");
  }
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t row_bytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(bytes.data() + row_bytes * y);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw PngError("failed writing PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

// 16-bit millimeter depth PNG -> meters. 8-bit grayscale is accepted as millimeters too.
inline DepthImage read_depth_png(const std::filesystem::path& path) {
  const detail::RawPng raw = detail::read_raw(path, false);
  DepthImage depth(raw.width, raw.height);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    std::uint32_t mm;
    if (raw.bit_depth == 16) {
      mm = (static_cast<std::uint32_t>(raw.bytes[2 * i]) << 8) | raw.bytes[2 * i + 1];
    } else {
      mm = raw.bytes[i];
    }
    depth[i] = static_cast<double>(mm) / 1000.0;
  }
  return depth;
}

inline std::uint16_t depth_to_millimeters(double meters) {
  if (!(meters > 0.0)) return 0;
  const double mm = std::round(meters * 1000.0);
  return static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0));
}

inline void write_depth_png(const std::filesystem::path& path, const DepthImage& depth) {
  std::vector<std::uint8_t> bytes(depth.size() * 2);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const std::uint16_t mm = depth_to_millimeters(depth[i]);
    bytes[2 * i] = static_cast<std::uint8_t>(mm >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(mm & 0xff);
  }
  detail::write_raw(path, depth.width(), depth.height(), PNG_COLOR_TYPE_GRAY, 16, bytes);
}

inline ColorImage read_color_png(const std::filesystem::path& path) {
  const detail::RawPng raw = detail::read_raw(path, true);
  ColorImage color(raw.width, raw.height);
  for (std::size_t i = 0; i < color.size(); ++i) {
    color[i] = Color(raw.bytes[3 * i], raw.bytes[3 * i + 1], raw.bytes[3 * i + 2]) / 255.0;
  }
  return color;
}

inline void write_color_png(const std::filesystem::path& path, const ColorImage& color) {
  std::vector<std::uint8_t> bytes(color.size() * 3);
  for (std::size_t i = 0; i < color.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(color[i][c], 0.0, 1.0);
      bytes[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  detail::write_raw(path, color.width(), color.height(), PNG_COLOR_TYPE_RGB, 8, bytes);
}

}  // namespace depthforge::io
