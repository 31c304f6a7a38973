#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace mimic {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline constexpr Color kGreen{0, 200, 0};
inline constexpr Color kRed{220, 0, 0};
inline constexpr Color kWhite{255, 255, 255};
inline constexpr Color kBlack{0, 0, 0};

/// 8-bit RGB raster.
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, Color fill = kBlack) : width(w), height(h), rgb(std::size_t(w) * h * 3) {
    for (int i = 0; i < w * h; ++i) {
      rgb[3 * i] = fill.r;
      rgb[3 * i + 1] = fill.g;
      rgb[3 * i + 2] = fill.b;
    }
  }

  void set(int x, int y, Color c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    std::size_t i = 3 * (std::size_t(y) * width + x);
    rgb[i] = c.r;
    rgb[i + 1] = c.g;
    rgb[i + 2] = c.b;
  }

  Color get(int x, int y) const {
    std::size_t i = 3 * (std::size_t(y) * width + x);
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
};

inline void write_png(const std::string& path, const Image& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.rgb.data(), 0, nullptr))
    throw std::runtime_error("write_png: cannot write " + path + ": " + pi.message);
}

inline Image read_png(const std::string& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw std::runtime_error("read_png: cannot open " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Image img;
  img.width = static_cast<int>(pi.width);
  img.height = static_cast<int>(pi.height);
  img.rgb.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr))
    throw std::runtime_error("read_png: failed reading " + path + ": " + pi.message);
  return img;
}

inline void fill_rect(Image& img, int x0, int y0, int x1, int y1, Color c) {
  for (int y = std::max(0, y0); y < std::min(img.height, y1); ++y)
    for (int x = std::max(0, x0); x < std::min(img.width, x1); ++x) img.set(x, y, c);
}

/// Axis-aligned rectangle outline; coordinates are the box edges in pixels.
inline void draw_rect(Image& img, int x0, int y0, int x1, int y1, Color c, int thickness = 1) {
  x1 = std::max(x0 + 1, x1);
  y1 = std::max(y0 + 1, y1);
  for (int t = 0; t < thickness; ++t) {
    for (int x = x0; x < x1; ++x) {
      img.set(x, y0 + t, c);
      img.set(x, y1 - 1 - t, c);
    }
    for (int y = y0; y < y1; ++y) {
      img.set(x0 + t, y, c);
      img.set(x1 - 1 - t, y, c);
    }
  }
}

inline void draw_line(Image& img, int x0, int y0, int x1, int y1, Color c) {
  int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    img.set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace mimic
