#include "tsm/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "tsm/errors.hpp"

namespace tsm {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::string& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path);
  return f;
}

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw DataError(std::string("png: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

void write_impl(const std::string& path, const Image8& img, int color_type, const Palette* palette) {
  if (img.px.size() != img.h * img.w * img.ch || img.h == 0 || img.w == 0) {
    throw DataError("write_png " + path + ": inconsistent raster");
  }
  File f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png: out of memory");
  }
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_color> colors;
    if (palette) {
      for (const auto& c : *palette) colors.push_back(png_color{c[0], c[1], c[2]});
      png_set_PLTE(png, info, colors.data(), static_cast<int>(colors.size()));
    }
    png_write_info(png, info);
    for (std::size_t r = 0; r < img.h; ++r) {
      png_write_row(png, img.px.data() + r * img.w * img.ch);
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw DataError("write failed for " + path);
}

}  // namespace

void write_png(const std::string& path, const Image8& img) {
  if (img.ch != 1 && img.ch != 3) throw DataError("write_png: unsupported channel count " + std::to_string(img.ch));
  write_impl(path, img, img.ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, nullptr);
}

void write_palette_png(const std::string& path, const Image8& indices, const Palette& palette) {
  if (indices.ch != 1) throw DataError("write_palette_png: index raster must have one channel");
  Palette full = palette;
  std::uint8_t max_index = 0;
  for (std::uint8_t v : indices.px) max_index = std::max(max_index, v);
  if (full.size() <= max_index) full.resize(static_cast<std::size_t>(max_index) + 1, {0, 0, 0});
  if (full.size() > 256) throw DataError("palette larger than 256 entries");
  write_impl(path, indices, PNG_COLOR_TYPE_PALETTE, &full);
}

Image8 read_png(const std::string& path) {
  File f = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw DataError(path + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png: out of memory");
  }
  Image8 img;
  try {
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (bit_depth == 16) throw DataError(path + ": 16-bit PNG not supported");
    if (color & PNG_COLOR_MASK_ALPHA) throw DataError(path + ": PNG with alpha not supported");
    if (bit_depth < 8) png_set_packing(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    img.w = png_get_image_width(png, info);
    img.h = png_get_image_height(png, info);
    img.ch = png_get_channels(png, info);
    img.px.resize(img.h * img.w * img.ch);
    std::vector<png_bytep> rows(img.h);
    for (std::size_t r = 0; r < img.h; ++r) rows[r] = img.px.data() + r * img.w * img.ch;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace tsm
