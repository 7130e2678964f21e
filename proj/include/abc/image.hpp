#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace abc {

// Row-major H x W x C float image. Pixel values are expected in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t offset(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int y, int x, int c) { return pixels[offset(y, x, c)]; }
  float at(int y, int x, int c) const { return pixels[offset(y, x, c)]; }
  std::size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  bool operator==(const Image&) const = default;
};

using Rgb = std::array<float, 3>;

// h, s, v all in [0, 1]; hue wraps.
Rgb hsv_to_rgb(float h, float s, float v);
std::array<float, 3> rgb_to_hsv(const Rgb& rgb);

void clamp_unit(Image& img);

}  // namespace abc
