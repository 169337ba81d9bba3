#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace tsm {

// 8-bit raster, row-major, channels interleaved.
struct Image8 {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t ch = 0;
  std::vector<std::uint8_t> px;

  bool operator==(const Image8&) const = default;
};

using Palette = std::vector<std::array<std::uint8_t, 3>>;

// Gray (ch 1) or RGB (ch 3) PNG. Throws DataError on I/O failure.
void write_png(const std::string& path, const Image8& img);
// Palette PNG of indices (ch 1); the palette is padded to cover every index.
void write_palette_png(const std::string& path, const Image8& indices, const Palette& palette);

// Reads gray, RGB or palette PNGs without conversion: palette images come
// back as their raw indices (ch 1), 16-bit and alpha are rejected.
Image8 read_png(const std::string& path);

}  // namespace tsm
