#pragma once

// Paired random image transforms for double augmentation. Randomness lives in
// sample_transform_pair; apply() is a pure function of (sample, observation).

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "abc/factor_model.hpp"

namespace abc {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

// Images used to repaint the background of masked (synthetic) observations.
class BackgroundPool {
 public:
  BackgroundPool() = default;
  explicit BackgroundPool(std::vector<Image> images);

  // Loads every readable raster (png, jpg, bmp, ...) in `directory`, sorted by
  // file name. Throws ConfigError when none can be read.
  static BackgroundPool load_directory(const std::string& directory);

  bool empty() const { return images_.empty(); }
  std::size_t size() const { return images_.size(); }
  const Image& operator[](std::size_t i) const { return images_[i]; }

 private:
  std::vector<Image> images_;
};

struct TransformSpec {
  bool translate = false;
  double crop_translate_amplitude = 0.1;  // fraction of height / width
  bool brightness = false;
  Range brightness_delta{-0.2, 0.2};
  bool hue = false;
  Range hue_delta{-0.1, 0.1};  // fraction of the hue circle
  bool noise = false;
  double pixel_noise_std = 0.05;
  bool edge_mix = false;
  Range edge_mix_weight{0.0, 0.3};
  bool background_paint = false;
  std::shared_ptr<const BackgroundPool> background_pool;

  // Throws ConfigError on negative amplitudes or inverted ranges.
  void validate() const;
  bool any_enabled() const { return translate || brightness || hue || noise || edge_mix || background_paint; }
};

struct BackgroundChoice {
  std::size_t image = 0;
  double offset_y = 0.0;  // crop origin as a fraction of the free margin
  double offset_x = 0.0;
};

// Concrete parameters of one transform draw; zero means "not applied".
struct TransformSample {
  double translate_y = 0.0;
  double translate_x = 0.0;
  double brightness = 0.0;
  double hue_shift = 0.0;
  double noise_std = 0.0;
  std::uint64_t noise_seed = 0;
  double edge_weight = 0.0;
  bool paint_background = false;
  BackgroundChoice background;
  std::shared_ptr<const BackgroundPool> pool;

  bool is_identity() const;
};

// Two independent draws from `spec`.
std::pair<TransformSample, TransformSample> sample_transform_pair(const TransformSpec& spec, Rng& rng);
TransformSample sample_transform(const TransformSpec& spec, Rng& rng);

// Applies translation, background paint, hue, brightness, edge mixing and
// pixel noise in that order, then clamps to [0, 1]. Background paint only
// touches observations carrying a foreground mask.
Observation apply(const TransformSample& sample, const Observation& obs);

// Per-channel Sobel gradient magnitude, scaled by 1/4 (the kernel gain).
Image sobel_magnitude(const Image& img);

}  // namespace abc
