#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "orthoplane/tensor.hpp"

namespace orthoplane {

// 8-bit raster as stored in a binary PPM (3 channels) or PGM (1 channel).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

// Clamps to [0, 1] and rounds to the nearest of 256 levels.
std::uint8_t to_byte(Real value);

// values: H x W x channels, channels 3 (P6) or 1 (P5).
Image8 quantize(const std::vector<Real>& values, std::size_t height, std::size_t width,
                std::size_t channels);
// Maps [lo, hi] onto [0, 1] before quantizing a single-channel image.
Image8 quantize_range(const std::vector<Real>& values, std::size_t height, std::size_t width,
                      Real lo, Real hi);

void write_netpbm(std::ostream& out, const Image8& image);
void write_netpbm(const std::filesystem::path& path, const Image8& image);
Image8 read_netpbm(std::istream& in);
Image8 read_netpbm(const std::filesystem::path& path);

}  // namespace orthoplane
