#include "abc/augmentations.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "abc/errors.hpp"

namespace abc {
namespace {

double draw(const Range& r, Rng& rng) {
  if (r.hi <= r.lo) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

void check_range(const Range& r, const char* what) {
  if (!(r.lo <= r.hi)) throw ConfigError(std::string(what) + " range is inverted");
}

int clampi(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

// Content shift by (dy, dx) pixels with edge replication.
void shift(Image& img, std::vector<float>& mask, int dy, int dx) {
  if (dy == 0 && dx == 0) return;
  const Image src = img;
  const std::vector<float> src_mask = mask;
  for (int y = 0; y < img.height; ++y) {
    const int sy = clampi(y - dy, 0, img.height - 1);
    for (int x = 0; x < img.width; ++x) {
      const int sx = clampi(x - dx, 0, img.width - 1);
      for (int c = 0; c < img.channels; ++c) img.at(y, x, c) = src.at(sy, sx, c);
      if (!mask.empty()) {
        mask[static_cast<std::size_t>(y) * img.width + x] = src_mask[static_cast<std::size_t>(sy) * img.width + sx];
      }
    }
  }
}

Image image_from_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  if (bgr.channels() == 1) {
    cv::cvtColor(bgr, rgb, cv::COLOR_GRAY2RGB);
  } else if (bgr.channels() == 4) {
    cv::cvtColor(bgr, rgb, cv::COLOR_BGRA2RGB);
  } else {
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  }
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, bgr.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0);
  Image out(f.rows, f.cols, 3);
  for (int y = 0; y < f.rows; ++y) {
    const auto* row = f.ptr<cv::Vec3f>(y);
    for (int x = 0; x < f.cols; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = row[x][c];
    }
  }
  return out;
}

}  // namespace

BackgroundPool::BackgroundPool(std::vector<Image> images) : images_(std::move(images)) {
  for (const auto& img : images_) {
    if (img.channels != 3 || img.height < 1 || img.width < 1) {
      throw ConfigError("background images must be non-empty RGB");
    }
  }
}

BackgroundPool BackgroundPool::load_directory(const std::string& directory) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(directory)) throw ConfigError("background directory '" + directory + "' not found");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(directory)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> images;
  for (const auto& f : files) {
    const cv::Mat m = cv::imread(f.string(), cv::IMREAD_UNCHANGED);
    if (!m.empty()) images.push_back(image_from_mat(m));
  }
  if (images.empty()) throw ConfigError("no readable images in background directory '" + directory + "'");
  return BackgroundPool(std::move(images));
}

void TransformSpec::validate() const {
  if (crop_translate_amplitude < 0) throw ConfigError("crop_translate_amplitude must be >= 0");
  if (pixel_noise_std < 0) throw ConfigError("pixel_noise_std must be >= 0");
  check_range(brightness_delta, "brightness_delta");
  check_range(hue_delta, "hue_delta");
  check_range(edge_mix_weight, "edge_mix_weight");
  if (edge_mix_weight.lo < 0) throw ConfigError("edge_mix_weight must be >= 0");
}

bool TransformSample::is_identity() const {
  return translate_y == 0 && translate_x == 0 && brightness == 0 && hue_shift == 0 && noise_std == 0 &&
         edge_weight == 0 && !paint_background;
}

TransformSample sample_transform(const TransformSpec& spec, Rng& rng) {
  TransformSample s;
  if (spec.translate && spec.crop_translate_amplitude > 0) {
    const double a = spec.crop_translate_amplitude;
    s.translate_y = std::uniform_real_distribution<double>(-a, a)(rng);
    s.translate_x = std::uniform_real_distribution<double>(-a, a)(rng);
  }
  if (spec.brightness) s.brightness = draw(spec.brightness_delta, rng);
  if (spec.hue) s.hue_shift = draw(spec.hue_delta, rng);
  if (spec.noise && spec.pixel_noise_std > 0) {
    s.noise_std = spec.pixel_noise_std;
    s.noise_seed = rng();
  }
  if (spec.edge_mix) s.edge_weight = draw(spec.edge_mix_weight, rng);
  if (spec.background_paint) {
    s.paint_background = true;
    s.pool = spec.background_pool;
    if (s.pool && !s.pool->empty()) {
      s.background.image = std::uniform_int_distribution<std::size_t>(0, s.pool->size() - 1)(rng);
      s.background.offset_y = std::uniform_real_distribution<double>(0, 1)(rng);
      s.background.offset_x = std::uniform_real_distribution<double>(0, 1)(rng);
    }
  }
  return s;
}

std::pair<TransformSample, TransformSample> sample_transform_pair(const TransformSpec& spec, Rng& rng) {
  spec.validate();
  TransformSample first = sample_transform(spec, rng);
  TransformSample second = sample_transform(spec, rng);
  return {std::move(first), std::move(second)};
}

Image sobel_magnitude(const Image& img) {
  Image out(img.height, img.width, img.channels);
  const auto px = [&](int y, int x, int c) {
    return img.at(clampi(y, 0, img.height - 1), clampi(x, 0, img.width - 1), c);
  };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        const float gx = (px(y - 1, x + 1, c) + 2 * px(y, x + 1, c) + px(y + 1, x + 1, c)) -
                         (px(y - 1, x - 1, c) + 2 * px(y, x - 1, c) + px(y + 1, x - 1, c));
        const float gy = (px(y + 1, x - 1, c) + 2 * px(y + 1, x, c) + px(y + 1, x + 1, c)) -
                         (px(y - 1, x - 1, c) + 2 * px(y - 1, x, c) + px(y - 1, x + 1, c));
        out.at(y, x, c) = 0.25f * std::sqrt(gx * gx + gy * gy);
      }
    }
  }
  return out;
}

Observation apply(const TransformSample& sample, const Observation& obs) {
  if (sample.is_identity()) return obs;
  Observation out = obs;
  Image& img = out.image;

  shift(img, out.mask, static_cast<int>(std::lround(sample.translate_y * img.height)),
        static_cast<int>(std::lround(sample.translate_x * img.width)));

  if (sample.paint_background) {
    if (!sample.pool || sample.pool->empty()) throw ConfigError("background paint requested without a background pool");
    if (out.has_mask() && img.channels == 3) {
      Image bg = (*sample.pool)[sample.background.image];
      if (bg.height < img.height || bg.width < img.width) {
        cv::Mat src(bg.height, bg.width, CV_32FC3, bg.pixels.data());
        cv::Mat dst;
        const double scale = std::max(static_cast<double>(img.height) / bg.height,
                                      static_cast<double>(img.width) / bg.width);
        cv::resize(src, dst, cv::Size(), scale, scale, cv::INTER_LINEAR);
        Image resized(dst.rows, dst.cols, 3);
        std::copy(dst.ptr<float>(), dst.ptr<float>() + resized.size(), resized.pixels.begin());
        // guard against rounding leaving the result one pixel short
        if (resized.height >= img.height && resized.width >= img.width) {
          bg = std::move(resized);
        }
      }
      const int oy = static_cast<int>(sample.background.offset_y * std::max(0, bg.height - img.height));
      const int ox = static_cast<int>(sample.background.offset_x * std::max(0, bg.width - img.width));
      for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
          const float m = out.mask[static_cast<std::size_t>(y) * img.width + x];
          const int by = clampi(oy + y, 0, bg.height - 1), bx = clampi(ox + x, 0, bg.width - 1);
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = m * img.at(y, x, c) + (1 - m) * bg.at(by, bx, c);
        }
      }
    }
  }

  if (sample.hue_shift != 0 && img.channels == 3) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        auto hsv = rgb_to_hsv({img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)});
        const Rgb rgb = hsv_to_rgb(hsv[0] + static_cast<float>(sample.hue_shift), hsv[1], hsv[2]);
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
      }
    }
  }

  if (sample.brightness != 0) {
    for (float& p : img.pixels) p += static_cast<float>(sample.brightness);
  }

  if (sample.edge_weight != 0) {
    const Image edges = sobel_magnitude(img);
    for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] += static_cast<float>(sample.edge_weight) * edges.pixels[i];
  }

  if (sample.noise_std > 0) {
    Rng noise_rng(sample.noise_seed);
    std::normal_distribution<float> gauss(0.0f, static_cast<float>(sample.noise_std));
    for (float& p : img.pixels) p += gauss(noise_rng);
  }

  clamp_unit(img);
  return out;
}

}  // namespace abc
