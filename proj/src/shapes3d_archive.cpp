#include <algorithm>
#include <cmath>

#include "abc/errors.hpp"
#include "abc/factor_model.hpp"

#ifdef ABC_HAVE_HDF5
#include <hdf5.h>
#endif

namespace abc {

#ifdef ABC_HAVE_HDF5
namespace {

constexpr std::array<const char*, 6> kShapes3dFactors = {"floor_hue", "wall_hue", "object_hue",
                                                         "scale",     "shape",    "orientation"};

class H5Handle {
 public:
  H5Handle(hid_t id, herr_t (*close)(hid_t)) : id_(id), close_(close) {}
  H5Handle(const H5Handle&) = delete;
  H5Handle& operator=(const H5Handle&) = delete;
  ~H5Handle() {
    if (id_ >= 0) close_(id_);
  }
  hid_t get() const { return id_; }
  bool valid() const { return id_ >= 0; }

 private:
  hid_t id_;
  herr_t (*close_)(hid_t);
};

// Lazily reads images by hyperslab; the full archive does not fit in memory.
class Shapes3dArchive final : public Dataset {
  static hid_t open_file(const std::string& path) {
    H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
    const hid_t id = H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT);
    if (id < 0) throw ConfigError("cannot open Shapes3D archive '" + path + "'");
    return id;
  }

 public:
  explicit Shapes3dArchive(const std::string& path)
      : file_(open_file(path), H5Fclose), images_(H5Dopen2(file_.get(), "images", H5P_DEFAULT), H5Dclose) {
    if (!images_.valid()) throw ConfigError("archive '" + path + "' has no 'images' dataset");

    H5Handle space(H5Dget_space(images_.get()), H5Sclose);
    hsize_t dims[4] = {0, 0, 0, 0};
    if (H5Sget_simple_extent_ndims(space.get()) != 4) throw ConfigError("'images' must be rank 4");
    H5Sget_simple_extent_dims(space.get(), dims, nullptr);
    count_ = dims[0];
    height_ = static_cast<int>(dims[1]);
    width_ = static_cast<int>(dims[2]);
    channels_ = static_cast<int>(dims[3]);

    H5Handle labels(H5Dopen2(file_.get(), "labels", H5P_DEFAULT), H5Dclose);
    if (!labels.valid()) throw ConfigError("archive '" + path + "' has no 'labels' dataset");
    H5Handle lspace(H5Dget_space(labels.get()), H5Sclose);
    hsize_t ldims[2] = {0, 0};
    if (H5Sget_simple_extent_ndims(lspace.get()) != 2) throw ConfigError("'labels' must be rank 2");
    H5Sget_simple_extent_dims(lspace.get(), ldims, nullptr);
    if (ldims[0] != count_ || ldims[1] != kShapes3dFactors.size()) {
      throw ConfigError("'labels' must be N x 6 aligned with 'images'");
    }
    std::vector<double> raw(count_ * ldims[1]);
    H5Dread(labels.get(), H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, raw.data());

    // Factor values become indices into the sorted distinct values.
    std::vector<Factor> factors;
    codes_.assign(count_ * ldims[1], 0);
    for (std::size_t f = 0; f < ldims[1]; ++f) {
      std::vector<double> distinct;
      for (std::size_t i = 0; i < count_; ++i) distinct.push_back(raw[i * ldims[1] + f]);
      std::sort(distinct.begin(), distinct.end());
      distinct.erase(std::unique(distinct.begin(), distinct.end(),
                                 [](double a, double b) { return std::abs(a - b) < 1e-9; }),
                     distinct.end());
      factors.push_back({kShapes3dFactors[f], DiscreteDomain{std::max<int>(2, static_cast<int>(distinct.size()))}});
      for (std::size_t i = 0; i < count_; ++i) {
        const double v = raw[i * ldims[1] + f];
        const auto it = std::lower_bound(distinct.begin(), distinct.end(), v - 1e-9);
        codes_[i * ldims[1] + f] = static_cast<int>(it - distinct.begin());
      }
    }
    spec_ = FactorSpec(std::move(factors));
  }

  const FactorSpec& spec() const override { return spec_; }
  std::size_t size() const override { return count_; }

  LatentCode latent(std::size_t index) const override {
    LatentCode code;
    for (std::size_t f = 0; f < spec_.size(); ++f) {
      code.values.push_back(codes_[index * spec_.size() + f]);
      code.roles.push_back(FactorRole::active);
    }
    return code;
  }

  Observation observation(std::size_t index) const override {
    if (index >= count_) throw ContractError("Shapes3D index out of range");
    H5Handle space(H5Dget_space(images_.get()), H5Sclose);
    const hsize_t start[4] = {index, 0, 0, 0};
    const hsize_t extent[4] = {1, static_cast<hsize_t>(height_), static_cast<hsize_t>(width_),
                               static_cast<hsize_t>(channels_)};
    H5Sselect_hyperslab(space.get(), H5S_SELECT_SET, start, nullptr, extent, nullptr);
    H5Handle mem(H5Screate_simple(4, extent, nullptr), H5Sclose);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(height_) * width_ * channels_);
    if (H5Dread(images_.get(), H5T_NATIVE_UINT8, mem.get(), space.get(), H5P_DEFAULT, buf.data()) < 0) {
      throw ConfigError("failed to read Shapes3D image " + std::to_string(index));
    }
    Observation obs;
    obs.image = Image(height_, width_, channels_);
    for (std::size_t i = 0; i < buf.size(); ++i) obs.image.pixels[i] = buf[i] / 255.0f;
    obs.source_latent = latent(index);
    obs.domain_tag = "shapes3d";
    return obs;
  }

 private:
  H5Handle file_;
  H5Handle images_;
  FactorSpec spec_;
  std::vector<int> codes_;
  std::size_t count_ = 0;
  int height_ = 0, width_ = 0, channels_ = 0;
};

}  // namespace

bool shapes3d_reader_available() { return true; }

std::shared_ptr<Dataset> open_shapes3d_archive(const std::string& path) {
  return std::make_shared<Shapes3dArchive>(path);
}

#else

bool shapes3d_reader_available() { return false; }

std::shared_ptr<Dataset> open_shapes3d_archive(const std::string& path) {
  throw ConfigError("this build has no HDF5 support; cannot open '" + path + "'");
}

#endif

}  // namespace abc
