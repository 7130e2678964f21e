#pragma once

// Latent-factor data model: factor specifications, latent codes, observations,
// and the dataset abstraction shared by every data source (procedural grids,
// ingested image files, the optional Shapes3D archive).

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "abc/image.hpp"

namespace abc {

using Rng = std::mt19937_64;

// Continuous factors are binned into this many levels when used as set keys.
inline constexpr int kDefaultKeyBins = 15;

struct DiscreteDomain {
  int cardinality = 2;
};

struct ContinuousDomain {
  double lo = 0.0;
  double hi = 1.0;
};

struct Factor {
  std::string name;
  std::variant<DiscreteDomain, ContinuousDomain> domain;

  bool is_discrete() const { return std::holds_alternative<DiscreteDomain>(domain); }
  int cardinality() const { return std::get<DiscreteDomain>(domain).cardinality; }
  const ContinuousDomain& interval() const { return std::get<ContinuousDomain>(domain); }

  bool contains(double value) const;
  // Number of distinct keys: cardinality for discrete, `bins` for continuous.
  int key_count(int bins = kDefaultKeyBins) const;
  // Exact-match grouping key of a value (discrete index, or bin index).
  int key(double value, int bins = kDefaultKeyBins) const;
};

class FactorSpec {
 public:
  FactorSpec() = default;
  // Throws ContractError on duplicate names, cardinality < 2 or lo >= hi.
  explicit FactorSpec(std::vector<Factor> factors);

  std::size_t size() const { return factors_.size(); }
  const Factor& operator[](std::size_t i) const { return factors_[i]; }
  const std::vector<Factor>& factors() const { return factors_; }
  std::optional<std::size_t> find(const std::string& name) const;
  // Throws ContractError for unknown names.
  std::size_t index_of(const std::string& name) const;

  bool operator==(const FactorSpec& o) const;

 private:
  std::vector<Factor> factors_;
};

enum class FactorRole : std::uint8_t { active, inactive };

struct LatentCode {
  std::vector<double> values;  // discrete factors hold integer indices
  std::vector<FactorRole> roles;

  int index(std::size_t i) const { return static_cast<int>(values[i]); }
  bool operator==(const LatentCode&) const = default;
};

// Partial assignment in value space (used to pin factors when sampling).
using ValueAssignment = std::map<std::string, double>;
// Partial assignment in key space (used for set curation).
using KeyAssignment = std::map<std::string, int>;

// Throws DomainError when `code` is not a valid point of `spec`.
void validate_latent(const FactorSpec& spec, const LatentCode& code);

// Factors named in `fixed` take the given values and are flagged inactive;
// the rest are drawn uniformly and flagged active.
LatentCode sample_latent(const FactorSpec& spec, Rng& rng, const ValueAssignment& fixed = {});

// True when `code` has the given key on every factor named in `keys`.
bool matches_keys(const FactorSpec& spec, const LatentCode& code, const KeyAssignment& keys,
                  int bins = kDefaultKeyBins);

struct Observation {
  Image image;
  std::vector<float> mask;  // H*W foreground mask, empty when unavailable
  std::optional<LatentCode> source_latent;
  std::string domain_tag;

  bool has_mask() const { return !mask.empty(); }
};

// Deterministic latent-code -> image map.
class Renderer {
 public:
  virtual ~Renderer() = default;
  virtual const FactorSpec& spec() const = 0;
  virtual Observation render(const LatentCode& code, std::uint64_t seed) const = 0;
};

// Six-factor Shapes3D-like scene on a 64x64 canvas: wall band (top quarter),
// object band (middle half) holding one shape, floor band (bottom quarter).
// Factors: floor_hue, wall_hue, object_hue, scale, shape, orientation.
class ProceduralRenderer final : public Renderer {
 public:
  static constexpr int kCanvas = 64;
  static constexpr int kWallRows = 16;   // rows [0, 16)
  static constexpr int kFloorRows = 16;  // rows [48, 64)
  static constexpr int kShapeKinds = 4;
  static constexpr double kMaxOrientationDeg = 30.0;

  // Standard 10/10/10/8/4/15 grid matching Shapes3D's factor cardinalities.
  static FactorSpec default_spec();

  ProceduralRenderer();
  // `spec` must name exactly the six procedural factors, in any domain.
  explicit ProceduralRenderer(FactorSpec spec);

  const FactorSpec& spec() const override { return spec_; }
  Observation render(const LatentCode& code, std::uint64_t seed) const override;

 private:
  double unit_value(const LatentCode& code, std::size_t slot) const;

  FactorSpec spec_;
  std::array<std::size_t, 6> slot_;  // canonical order -> spec index
};

Observation render_procedural(const LatentCode& code, std::uint64_t seed);

// Planar-rotation toy pose scene: one of `glyph_count()` asymmetric stroke
// glyphs, rotated in-plane, drawn in a hue on a dark background.
// Factors: instance (discrete), rotation (radians, [0, 2pi)), hue ([0, 1)).
class GlyphRenderer final : public Renderer {
 public:
  explicit GlyphRenderer(int canvas = 32);

  static int glyph_count();

  const FactorSpec& spec() const override { return spec_; }
  Observation render(const LatentCode& code, std::uint64_t seed) const override;
  int canvas() const { return canvas_; }

 private:
  FactorSpec spec_;
  int canvas_;
};

// Random-access collection of observations with ground-truth factors.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual const FactorSpec& spec() const = 0;
  virtual std::size_t size() const = 0;
  virtual LatentCode latent(std::size_t index) const = 0;
  virtual Observation observation(std::size_t index) const = 0;
  // Indices whose latent codes carry `keys`; default is a linear scan.
  virtual std::vector<std::size_t> matching(const KeyAssignment& keys) const;
  virtual int key_bins() const { return kDefaultKeyBins; }
};

// Full Cartesian grid over a renderer's factors. Discrete factors enumerate
// their cardinality; continuous factors are sampled at `resolution` bin
// centres. Images are rendered on demand.
class GridDataset final : public Dataset {
 public:
  GridDataset(std::shared_ptr<const Renderer> renderer, std::uint64_t seed,
              std::map<std::string, int> continuous_resolution = {});

  const FactorSpec& spec() const override { return renderer_->spec(); }
  std::size_t size() const override { return size_; }
  LatentCode latent(std::size_t index) const override;
  Observation observation(std::size_t index) const override;
  std::vector<std::size_t> matching(const KeyAssignment& keys) const override;

  const Renderer& renderer() const { return *renderer_; }
  std::uint64_t seed() const { return seed_; }
  int levels(std::size_t factor) const { return levels_[factor]; }
  double level_value(std::size_t factor, int level) const;

 private:
  std::shared_ptr<const Renderer> renderer_;
  std::uint64_t seed_;
  std::vector<int> levels_;
  std::size_t size_ = 1;
};

// In-memory dataset of fully materialized observations.
class ListDataset final : public Dataset {
 public:
  ListDataset(FactorSpec spec, std::vector<Observation> items);

  const FactorSpec& spec() const override { return spec_; }
  std::size_t size() const override { return items_.size(); }
  LatentCode latent(std::size_t index) const override { return *items_[index].source_latent; }
  Observation observation(std::size_t index) const override { return items_[index]; }
  const Observation& at(std::size_t index) const { return items_[index]; }
  std::vector<std::size_t> matching(const KeyAssignment& keys) const override;

  // Element indices per key of one factor (e.g. class label -> members).
  std::map<int, std::vector<std::size_t>> groups(const std::string& factor) const;

 private:
  FactorSpec spec_;
  std::vector<Observation> items_;
  std::vector<std::vector<int>> keys_;  // per item, per factor
};

// View of a base dataset restricted to a sorted subset of its indices (e.g.
// a grid with some instances held out).
class SubsetDataset final : public Dataset {
 public:
  // Throws ContractError on an out-of-range index.
  SubsetDataset(std::shared_ptr<const Dataset> base, std::vector<std::size_t> indices);
  // Members of `base` whose `factor` key is not in `excluded`.
  static std::shared_ptr<SubsetDataset> excluding(std::shared_ptr<const Dataset> base, const std::string& factor,
                                                  const std::vector<int>& excluded);

  const FactorSpec& spec() const override { return base_->spec(); }
  std::size_t size() const override { return indices_.size(); }
  LatentCode latent(std::size_t index) const override { return base_->latent(indices_[index]); }
  Observation observation(std::size_t index) const override { return base_->observation(indices_[index]); }
  std::vector<std::size_t> matching(const KeyAssignment& keys) const override;
  int key_bins() const override { return base_->key_bins(); }

  std::size_t base_index(std::size_t index) const { return indices_[index]; }

 private:
  std::shared_ptr<const Dataset> base_;
  std::vector<std::size_t> indices_;
};

// ---- IDX (MNIST layout) ingestion ----

// Images scaled to [0,1]. Throws ParseError with the offending byte offset.
std::vector<Image> read_idx_images(const std::string& path);
std::vector<int> read_idx_labels(const std::string& path);

struct IdxIngest {
  std::shared_ptr<ListDataset> dataset;  // single discrete factor "label"
  std::vector<Observation> withheld;     // members of the withheld class
};

IdxIngest ingest_idx_images(const std::string& images_path, const std::string& labels_path,
                            std::optional<int> withheld_label = std::nullopt,
                            const std::string& domain_tag = "mnist");

// ---- Optional Shapes3D archive (HDF5: "images" N x 64 x 64 x 3 uint8,
// "labels" N x 6). Available when built with HDF5. ----

bool shapes3d_reader_available();
std::shared_ptr<Dataset> open_shapes3d_archive(const std::string& path);

}  // namespace abc
