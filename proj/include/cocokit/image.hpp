#pragma once

#include <cstdint>
#include <vector>

namespace cocokit {

/// One image with intensities in [0, 1], stored height-major then width then
/// channel (pixel (y, x, c) at index (y * width + x) * channels + c).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
};

}  // namespace cocokit
