#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tlg {

// 8-bit interleaved raster; channels is 1 (gray) or 3 (RGB).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// Reads any PNG, normalized to 8-bit gray or RGB (alpha dropped). Throws LoadError.
Image8 read_png(const std::string& path);
void write_png(const std::string& path, const Image8& image);

}  // namespace tlg
