#pragma once

// 8-bit PNG read/write for [C, H, W] float images with values in [0, 1], plus
// small filesystem helpers that map failures to IoError.

#include "xdyna/tensor.hpp"

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace xdyna {

namespace fs = std::filesystem;

inline std::uint8_t to_u8(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }
inline float from_u8(std::uint8_t q) { return static_cast<float>(q) / 255.0f; }

/// Snap [-1, 1] pixel values onto the grid that survives a PNG round trip.
inline float quantize_signed(float v) { return from_u8(to_u8((v + 1.0f) * 0.5f)) * 2.0f - 1.0f; }
inline float quantize_unit(float v) { return from_u8(to_u8(v)); }

/// Write a [C, H, W] image (C = 1 or 3, values in [0, 1]) as 8-bit PNG.
inline void write_png(const fs::path& path, const Tensor<float>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ShapeError("write_png: expected [1|3, H, W], got " + shape_str(img.shape()));
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 9);
  png_set_IHDR(png, info, w, h, 8, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(w) * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        row[static_cast<std::size_t>(x) * c + ch] = to_u8(img[(static_cast<std::size_t>(ch) * h + y) * w + x]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("error closing '" + path.string() + "'");
}

/// Read an 8-bit gray or RGB PNG into [C, H, W] with values in [0, 1].
inline Tensor<float> read_png(const fs::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw IoError("cannot open '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng failed reading '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) != 8 || (type != PNG_COLOR_TYPE_RGB && type != PNG_COLOR_TYPE_GRAY)) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("'" + path.string() + "' is not an 8-bit gray/RGB PNG");
  }
  const int c = type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  Tensor<float> img({c, h, w});
  std::vector<png_byte> row(static_cast<std::size_t>(w) * c);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        img[(static_cast<std::size_t>(ch) * h + y) * w + x] = from_u8(row[static_cast<std::size_t>(x) * c + ch]);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline std::string frame_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d.png", prefix, i);
  return buf;
}

}  // namespace xdyna
