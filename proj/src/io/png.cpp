// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "chunkflow/io.hpp"

namespace chunkflow {

namespace {

[[noreturn]] void on_png_error(png_structp, png_const_charp msg) { throw FormatError(std::string("PNG: ") + msg); }
void on_png_warning(png_structp, png_const_charp) {}

struct ReadCursor {
  std::span<const std::uint8_t> data;
  std::size_t pos = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_png(const RgbaImage& image) {
  if (image.width == 0 || image.height == 0) throw InvalidArgument("PNG of an empty image");
  if (image.pixels.size() != std::size_t{image.width} * image.height * 4)
    throw ShapeMismatch("PNG pixel buffer does not match width x height x 4");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  if (!png) throw Error("PNG: out of memory");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  try {
    if (!info) throw Error("PNG: out of memory");
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t n) {
          auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
          v->insert(v->end(), data, data + n);
        },
        nullptr);
    png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (std::uint32_t y = 0; y < image.height; ++y)
      png_write_row(png, const_cast<png_bytep>(image.pixels.data() + std::size_t{y} * image.width * 4));
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

RgbaImage decode_png(std::span<const std::uint8_t> data) {
  if (data.size() < 8 || png_sig_cmp(data.data(), 0, 8) != 0) throw FormatError("PNG: bad signature");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  if (!png) throw Error("PNG: out of memory");
  png_infop info = png_create_info_struct(png);
  ReadCursor cur{data, 0};
  RgbaImage img;
  try {
    if (!info) throw Error("PNG: out of memory");
    png_set_read_fn(png, &cur, [](png_structp p, png_bytep out, png_size_t n) {
      auto* c = static_cast<ReadCursor*>(png_get_io_ptr(p));
      if (c->data.size() - c->pos < n) png_error(p, "truncated data");
      std::memcpy(out, c->data.data() + c->pos, n);
      c->pos += n;
    });
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_gray_to_rgb(png);
    png_set_add_alpha(png, 0xff, PNG_FILLER_AFTER);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.pixels.resize(std::size_t{img.width} * img.height * 4);
    for (std::uint32_t y = 0; y < img.height; ++y)
      png_read_row(png, img.pixels.data() + std::size_t{y} * img.width * 4, nullptr);
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const RgbaImage& image) {
  const auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path.string() + ": cannot create");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(path.string() + ": write failed");
}

RgbaImage read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace chunkflow
