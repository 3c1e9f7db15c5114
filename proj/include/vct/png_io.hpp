#pragma once

// Thin wrappers over libpng's simplified API. 8-bit RGB and grayscale only.

#include <cstdint>
#include <string>
#include <vector>

namespace vct {

struct ImageU8 {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

ImageU8 read_png(const std::string& path, int want_channels);
void write_png(const std::string& path, const ImageU8& img);

}  // namespace vct
