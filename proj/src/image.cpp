#include "abc/image.hpp"

#include <algorithm>
#include <cmath>

namespace abc {

Rgb hsv_to_rgb(float h, float s, float v) {
  h = h - std::floor(h);
  const float scaled = h * 6.0f;
  const int sector = static_cast<int>(scaled) % 6;
  const float f = scaled - std::floor(scaled);
  const float p = v * (1.0f - s);
  const float q = v * (1.0f - s * f);
  const float t = v * (1.0f - s * (1.0f - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

std::array<float, 3> rgb_to_hsv(const Rgb& rgb) {
  const auto [r, g, b] = rgb;
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  const float delta = mx - mn;
  float h = 0.0f;
  if (delta > 0.0f) {
    if (mx == r) {
      h = (g - b) / delta;
    } else if (mx == g) {
      h = 2.0f + (b - r) / delta;
    } else {
      h = 4.0f + (r - g) / delta;
    }
    h /= 6.0f;
    if (h < 0.0f) h += 1.0f;
  }
  const float s = mx > 0.0f ? delta / mx : 0.0f;
  return {h, s, mx};
}

void clamp_unit(Image& img) {
  for (float& p : img.pixels) p = std::clamp(p, 0.0f, 1.0f);
}

}  // namespace abc
