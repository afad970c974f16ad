#include "orthoplane/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace orthoplane {

std::uint8_t to_byte(Real value) {
  if (!(value > 0.0)) return 0;
  if (value >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(value * 255.0));
}

Image8 quantize(const std::vector<Real>& values, std::size_t height, std::size_t width,
                std::size_t channels) {
  if (channels != 1 && channels != 3) {
    throw std::invalid_argument("quantize: images have 1 or 3 channels");
  }
  if (values.size() != height * width * channels) {
    throw std::invalid_argument("quantize: value count does not match H x W x channels");
  }
  Image8 img{width, height, channels, std::vector<std::uint8_t>(values.size())};
  std::transform(values.begin(), values.end(), img.pixels.begin(), to_byte);
  return img;
}

Image8 quantize_range(const std::vector<Real>& values, std::size_t height, std::size_t width,
                      Real lo, Real hi) {
  if (!(hi > lo)) throw std::invalid_argument("quantize_range: empty range");
  std::vector<Real> scaled(values.size());
  std::transform(values.begin(), values.end(), scaled.begin(),
                 [&](Real v) { return (v - lo) / (hi - lo); });
  return quantize(scaled, height, width, 1);
}

void write_netpbm(std::ostream& out, const Image8& image) {
  out << (image.channels == 3 ? "P6" : "P5") << '\n'
      << image.width << ' ' << image.height << '\n'
      << 255 << '\n';
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

void write_netpbm(const std::filesystem::path& path, const Image8& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_netpbm(out, image);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Image8 read_netpbm(std::istream& in) {
  std::string magic;
  Image8 img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || (magic != "P6" && magic != "P5") || maxval != 255) {
    throw std::runtime_error("netpbm: expected binary P6/P5 with maxval 255");
  }
  in.get();
  img.channels = magic == "P6" ? 3 : 1;
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw std::runtime_error("netpbm: truncated pixel data");
  return img;
}

Image8 read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_netpbm(in);
}

}  // namespace orthoplane
