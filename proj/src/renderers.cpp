#include <algorithm>
#include <cmath>
#include <numbers>

#include "abc/errors.hpp"
#include "abc/factor_model.hpp"

namespace abc {
namespace {

constexpr std::array<const char*, 6> kProceduralNames = {"floor_hue", "wall_hue",  "object_hue",
                                                         "scale",     "shape",     "orientation"};
enum Slot : std::size_t { kFloorHue, kWallHue, kObjectHue, kScale, kShape, kOrientation };

constexpr int kSuperSample = 4;
// Hues span [0, 0.9) so the two ends of a factor's range stay distinguishable.
constexpr float kHueSpan = 0.9f;

// Fixed per-seed texture value in [-1, 1]; independent of the latent code so
// it never breaks factor locality.
float texture(std::uint64_t seed, int y, int x) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(y) * 0xBF58476D1CE4E5B9ull +
                    static_cast<std::uint64_t>(x) * 0x94D049BB133111EBull;
  h ^= h >> 31;
  h *= 0xD6E8FEB86659FD93ull;
  h ^= h >> 32;
  return static_cast<float>(h % 2001) / 1000.0f - 1.0f;
}

// Point-in-shape test in the shape's own frame, `r` the half-size.
bool inside_shape(int kind, double x, double y, double r) {
  switch (kind) {
    case 0:  // box
      return std::abs(x) <= r && std::abs(y) <= r;
    case 1: {  // ellipse
      const double a = x / r;
      const double b = y / (0.55 * r);
      return a * a + b * b <= 1.0;
    }
    case 2: {  // triangle with apex up, barycentric half-plane test
      const double ax = 0, ay = -r, bx = 0.866 * r, by = 0.5 * r, cx = -0.866 * r, cy = 0.5 * r;
      const auto side = [](double px, double py, double qx, double qy, double sx, double sy) {
        return (qx - px) * (sy - py) - (qy - py) * (sx - px);
      };
      const double d1 = side(ax, ay, bx, by, x, y);
      const double d2 = side(bx, by, cx, cy, x, y);
      const double d3 = side(cx, cy, ax, ay, x, y);
      return (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0);
    }
    default:  // plus sign
      return (std::abs(x) <= r && std::abs(y) <= 0.35 * r) ||
             (std::abs(x) <= 0.35 * r && std::abs(y) <= r);
  }
}

struct Point {
  double x, y;
};
using Polyline = std::vector<Point>;
using Glyph = std::vector<Polyline>;

// Stroke glyphs on [-1, 1]^2 (y down). None has a rotational symmetry.
const std::vector<Glyph>& glyphs() {
  static const std::vector<Glyph> kGlyphs = {
      {{{-0.6, 1}, {-0.6, -1}, {0.7, -1}}, {{-0.6, 0}, {0.4, 0}}},  // F
      {{{-0.6, -1}, {-0.6, 1}, {0.7, 1}}},                           // L
      {{{0.4, -1}, {0.4, 0.6}, {0.1, 1}, {-0.4, 1}, {-0.7, 0.6}}},   // J
      {{{-0.6, 1}, {-0.6, -1}, {0.4, -1}, {0.7, -0.7}, {0.7, -0.3}, {0.4, 0}, {-0.6, 0}}},  // P
      {{{-0.6, 1}, {-0.6, -1}, {0.4, -1}, {0.7, -0.7}, {0.7, -0.3}, {0.4, 0}, {-0.6, 0}},
       {{0.0, 0}, {0.7, 1}}},                                                              // R
      {{{-0.7, -1}, {0.7, -1}, {-0.2, 1}}},                                                // 7
      {{{0.3, 1}, {0.3, -1}, {-0.7, 0.4}, {0.8, 0.4}}},                                    // 4
      {{{-0.7, -0.6}, {-0.4, -1}, {0.4, -1}, {0.7, -0.6}, {0.7, -0.2}, {-0.7, 1}, {0.7, 1}}},  // 2
      {{{0.7, -0.7}, {0.3, -1}, {-0.3, -1}, {-0.7, -0.6}, {-0.7, 0.6}, {-0.3, 1}, {0.3, 1},
        {0.7, 0.6}, {0.7, 0.1}, {0.1, 0.1}}},                                              // G
      {{{-0.6, -1}, {-0.6, 1}}, {{0.7, -1}, {-0.6, 0.2}}, {{-0.2, -0.2}, {0.7, 1}}},       // K
      {{{-0.7, -1}, {0, 0}, {0.7, -1}}, {{0, 0}, {0, 1}}},                                 // Y
      {{{0.7, 1}, {-0.6, 1}, {-0.6, -1}, {0.7, -1}}, {{-0.6, 0}, {0.4, 0}}},               // E
  };
  return kGlyphs;
}

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

bool on_glyph(const Glyph& g, Point p, double half_stroke) {
  for (const auto& line : g) {
    for (std::size_t k = 1; k < line.size(); ++k) {
      if (segment_distance(p, line[k - 1], line[k]) <= half_stroke) return true;
    }
  }
  return false;
}

}  // namespace

FactorSpec ProceduralRenderer::default_spec() {
  return FactorSpec({{"floor_hue", DiscreteDomain{10}},
                     {"wall_hue", DiscreteDomain{10}},
                     {"object_hue", DiscreteDomain{10}},
                     {"scale", DiscreteDomain{8}},
                     {"shape", DiscreteDomain{kShapeKinds}},
                     {"orientation", DiscreteDomain{15}}});
}

ProceduralRenderer::ProceduralRenderer() : ProceduralRenderer(default_spec()) {}

ProceduralRenderer::ProceduralRenderer(FactorSpec spec) : spec_(std::move(spec)) {
  if (spec_.size() != kProceduralNames.size()) {
    throw ContractError("procedural renderer needs exactly 6 factors, got " +
                        std::to_string(spec_.size()));
  }
  for (std::size_t s = 0; s < kProceduralNames.size(); ++s) {
    const auto idx = spec_.find(kProceduralNames[s]);
    if (!idx) throw ContractError(std::string("procedural spec lacks factor '") + kProceduralNames[s] + "'");
    slot_[s] = *idx;
  }
}

double ProceduralRenderer::unit_value(const LatentCode& code, std::size_t slot) const {
  const std::size_t i = slot_[slot];
  const Factor& f = spec_[i];
  if (f.is_discrete()) return code.values[i] / (f.cardinality() - 1);
  return (code.values[i] - f.interval().lo) / (f.interval().hi - f.interval().lo);
}

Observation ProceduralRenderer::render(const LatentCode& code, std::uint64_t seed) const {
  if (code.values.size() != spec_.size()) {
    throw ContractError("latent code does not match the procedural factor spec");
  }
  validate_latent(spec_, code);

  constexpr int n = kCanvas;
  Observation obs;
  obs.image = Image(n, n, 3);
  obs.mask.assign(static_cast<std::size_t>(n) * n, 0.0f);
  obs.source_latent = code;
  obs.domain_tag = "procedural";

  const Rgb wall = hsv_to_rgb(kHueSpan * static_cast<float>(unit_value(code, kWallHue)), 0.75f, 0.9f);
  const Rgb floor = hsv_to_rgb(kHueSpan * static_cast<float>(unit_value(code, kFloorHue)), 0.75f, 0.65f);
  const Rgb object = hsv_to_rgb(kHueSpan * static_cast<float>(unit_value(code, kObjectHue)), 0.85f, 0.95f);

  const int kind = static_cast<int>(std::lround(unit_value(code, kShape) * (kShapeKinds - 1)));
  const double half = 9.0 * (0.75 + 0.5 * unit_value(code, kScale));
  const double angle = (2.0 * unit_value(code, kOrientation) - 1.0) * kMaxOrientationDeg *
                       std::numbers::pi / 180.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double centre = n / 2.0;

  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      Rgb px;
      if (y < kWallRows) {
        px = wall;
      } else if (y >= n - kFloorRows) {
        px = floor;
      } else {
        const float bg = 0.45f + 0.02f * texture(seed, y, x);
        int hits = 0;
        for (int sy = 0; sy < kSuperSample; ++sy) {
          for (int sx = 0; sx < kSuperSample; ++sx) {
            const double wx = x + (sx + 0.5) / kSuperSample - centre;
            const double wy = y + (sy + 0.5) / kSuperSample - centre;
            // inverse rotation into the shape frame
            const double lx = ca * wx + sa * wy;
            const double ly = -sa * wx + ca * wy;
            hits += inside_shape(kind, lx, ly, half) ? 1 : 0;
          }
        }
        const float cover = static_cast<float>(hits) / (kSuperSample * kSuperSample);
        obs.mask[static_cast<std::size_t>(y) * n + x] = cover;
        for (int c = 0; c < 3; ++c) px[c] = cover * object[c] + (1.0f - cover) * bg;
      }
      for (int c = 0; c < 3; ++c) obs.image.at(y, x, c) = std::clamp(px[c], 0.0f, 1.0f);
    }
  }
  return obs;
}

Observation render_procedural(const LatentCode& code, std::uint64_t seed) {
  static const ProceduralRenderer renderer;
  return renderer.render(code, seed);
}

// ---- GlyphRenderer ----

GlyphRenderer::GlyphRenderer(int canvas)
    : spec_({{"instance", DiscreteDomain{static_cast<int>(glyphs().size())}},
             {"rotation", ContinuousDomain{0.0, 2.0 * std::numbers::pi}},
             {"hue", ContinuousDomain{0.0, 1.0}}}),
      canvas_(canvas) {
  if (canvas < 8) throw ContractError("glyph canvas must be at least 8 pixels");
}

int GlyphRenderer::glyph_count() { return static_cast<int>(glyphs().size()); }

Observation GlyphRenderer::render(const LatentCode& code, std::uint64_t seed) const {
  if (code.values.size() != spec_.size()) throw ContractError("latent code does not match the glyph spec");
  validate_latent(spec_, code);

  const int n = canvas_;
  const Glyph& glyph = glyphs()[static_cast<std::size_t>(code.index(0))];
  const double angle = code.values[1];
  const Rgb ink = hsv_to_rgb(static_cast<float>(code.values[2]), 0.8f, 0.95f);
  const double ca = std::cos(angle), sa = std::sin(angle);
  // Glyph box [-1,1]^2 scaled so its rotated corners stay on the canvas.
  const double scale = 0.34 * n;
  const double half_stroke = 0.17;
  const double centre = n / 2.0;

  Observation obs;
  obs.image = Image(n, n, 3);
  obs.mask.assign(static_cast<std::size_t>(n) * n, 0.0f);
  obs.source_latent = code;
  obs.domain_tag = "glyph";
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuperSample; ++sy) {
        for (int sx = 0; sx < kSuperSample; ++sx) {
          const double wx = (x + (sx + 0.5) / kSuperSample - centre) / scale;
          const double wy = (y + (sy + 0.5) / kSuperSample - centre) / scale;
          const Point local{ca * wx + sa * wy, -sa * wx + ca * wy};
          hits += on_glyph(glyph, local, half_stroke) ? 1 : 0;
        }
      }
      const float cover = static_cast<float>(hits) / (kSuperSample * kSuperSample);
      obs.mask[static_cast<std::size_t>(y) * n + x] = cover;
      const float bg = 0.12f + 0.02f * texture(seed, y, x);
      for (int c = 0; c < 3; ++c) {
        obs.image.at(y, x, c) = std::clamp(cover * ink[c] + (1.0f - cover) * bg, 0.0f, 1.0f);
      }
    }
  }
  return obs;
}

}  // namespace abc
