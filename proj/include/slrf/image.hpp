#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace slrf {

// Float image, row-major, values in [0,1]. channels is 1, 3 or 4.
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c),
                               pixels(static_cast<size_t>(w) * h * c, 0.0f) {}

  float& at(int x, int y, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  bool same_dims(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

// 8-bit PNG IO (RGB, RGBA or grayscale). Writes are atomic (tmp + rename)
// and byte-deterministic for identical input.
void save_png(const Image& img, const std::string& path);
Image load_png(const std::string& path);

uint8_t quantize8(float v);
float max_abs_diff(const Image& a, const Image& b);

}  // namespace slrf
