#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaqn/dataset.hpp"

namespace gaqn {

using Rgb = std::array<std::uint8_t, 3>;

/// Interleaved 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, Rgb fill = {255, 255, 255}) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t i = 0; i < pixels.size(); i += 3) std::copy(fill.begin(), fill.end(), pixels.begin() + i);
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    std::copy(c.begin(), c.end(), pixels.begin() + (static_cast<std::size_t>(y) * width + x) * 3);
  }
  Rgb get(int x, int y) const {
    const auto* p = &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
    return {p[0], p[1], p[2]};
  }
  bool operator==(const Image&) const = default;
};

inline Image frame_image(const Frame& f) {
  if (f.rank() != 3 || f.dim(0) != kChannels) throw ShapeError("expected a [3,H,W] frame, got " + shape_str(f.shape()));
  const int h = f.dim(1), w = f.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Image img(w, h);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < kChannels; ++c) img.pixels[i * 3 + static_cast<std::size_t>(c)] = quantize(f[static_cast<std::size_t>(c) * plane + i]);
  return img;
}

/// Copies `src` into `dst` with its top-left corner at (x0, y0), clipping at the edges.
inline void blit(Image& dst, const Image& src, int x0, int y0) {
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) dst.set(x0 + x, y0 + y, src.get(x, y));
}

inline void draw_line(Image& img, double x0, double y0, double x1, double y1, Rgb c) {
  const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    img.set(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
  }
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::vector<std::uint8_t> bytes;
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  bytes.assign(header.begin(), header.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  detail::write_file(path, bytes);
}

inline void write_frame_ppm(const std::filesystem::path& path, const Frame& f) { write_ppm(path, frame_image(f)); }

/// Reads a binary P6 file with maxval 255.
inline Image read_ppm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#')
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      else if (std::isspace(bytes[pos]))
        ++pos;
      else
        break;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    return t;
  };
  if (token() != "P6") throw FormatError(path.string() + ": not a binary PPM");
  Image img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed PPM header");
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * 3;
  if (img.width <= 0 || img.height <= 0 || bytes.size() - pos != n) throw FormatError(path.string() + ": bad PPM size");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

}  // namespace gaqn
