#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crdiff/tensor.hpp"

namespace crdiff {

/// Grey image in [-1, 1] mapped to 8 bits.
struct Gray8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
};

inline std::uint8_t to_byte(float v) {
  const double s = std::round((std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(s);
}

/// image is (1,H,W) or (H,W).
inline Gray8 to_gray8(const Tensor& image) {
  const int H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
  if (image.size() != static_cast<std::size_t>(H) * W) throw InputError("to_gray8: expected a single-channel image");
  Gray8 g{H, W, std::vector<std::uint8_t>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) g.pixels[i] = to_byte(image[i]);
  return g;
}

inline void write_pgm(const std::filesystem::path& path, const Gray8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_pgm(const std::filesystem::path& path, const Tensor& image) { write_pgm(path, to_gray8(image)); }

inline Gray8 read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w <= 0 || h <= 0) throw InputError(path.string() + ": not an 8-bit P5 PGM");
  in.get();
  Gray8 g{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  in.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (!in) throw InputError(path.string() + ": truncated PGM");
  return g;
}

/// Pastes `tile` with its top-left corner at (y, x).
inline void blit(Gray8& canvas, const Gray8& tile, int y, int x) {
  for (int i = 0; i < tile.height; ++i)
    for (int j = 0; j < tile.width; ++j)
      canvas.pixels[static_cast<std::size_t>(y + i) * canvas.width + x + j] =
          tile.pixels[static_cast<std::size_t>(i) * tile.width + j];
}

}  // namespace crdiff
