#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "../support/doctest_torch.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "abc/errors.hpp"
#include "abc/factor_model.hpp"

#ifdef ABC_HAVE_HDF5
#include <hdf5.h>
#endif

using namespace abc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path dir = fs::temp_directory_path() / ("abc_factor_test_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> idx_header(std::uint8_t ndims, const std::vector<std::uint32_t>& dims) {
  std::vector<std::uint8_t> b = {0, 0, 0x08, ndims};
  for (auto d : dims) {
    b.push_back(static_cast<std::uint8_t>(d >> 24));
    b.push_back(static_cast<std::uint8_t>(d >> 16));
    b.push_back(static_cast<std::uint8_t>(d >> 8));
    b.push_back(static_cast<std::uint8_t>(d));
  }
  return b;
}

// chi-square 0.999 quantiles for the degrees of freedom used below
double chi2_critical_999(int dof) {
  switch (dof) {
    case 3: return 16.266;
    case 7: return 24.322;
    case 9: return 27.877;
    case 14: return 36.123;
    default: FAIL("no tabulated quantile"); return 0;
  }
}

LatentCode code_of(std::vector<double> v) {
  return LatentCode{std::move(v), std::vector<FactorRole>(6, FactorRole::active)};
}

}  // namespace

TEST_CASE("factor spec rejects malformed factors") {
  CHECK_THROWS_AS(FactorSpec({{"a", DiscreteDomain{3}}, {"a", DiscreteDomain{3}}}), ContractError);
  CHECK_THROWS_AS(FactorSpec({{"a", DiscreteDomain{1}}}), ContractError);
  CHECK_THROWS_AS(FactorSpec({{"a", ContinuousDomain{1.0, 1.0}}}), ContractError);
  CHECK_NOTHROW(FactorSpec({{"a", DiscreteDomain{2}}, {"b", ContinuousDomain{-1.0, 2.0}}}));
}

TEST_CASE("continuous factors bin into 15 keys") {
  const Factor f{"angle", ContinuousDomain{0.0, 1.5}};
  CHECK(f.key_count() == 15);
  CHECK(f.key(0.0) == 0);
  CHECK(f.key(0.0999) == 0);
  CHECK(f.key(0.1) == 1);
  CHECK(f.key(1.5) == 14);
}

TEST_CASE("sample_latent pins fixed factors as inactive") {
  const FactorSpec spec = ProceduralRenderer::default_spec();
  Rng rng(7);
  const LatentCode code = sample_latent(spec, rng, {{"wall_hue", 3}});
  const std::size_t wall = spec.index_of("wall_hue");
  CHECK(code.values[wall] == 3);
  int inactive = 0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    CHECK(spec[i].contains(code.values[i]));
    if (code.roles[i] == FactorRole::inactive) ++inactive;
  }
  CHECK(inactive == 1);
  CHECK(code.roles[wall] == FactorRole::inactive);
}

TEST_CASE("sample_latent with every factor fixed is deterministic") {
  const FactorSpec spec = ProceduralRenderer::default_spec();
  const ValueAssignment all = {{"floor_hue", 1}, {"wall_hue", 2}, {"object_hue", 3},
                               {"scale", 4},     {"shape", 0},    {"orientation", 14}};
  Rng a(1), b(999);
  const LatentCode x = sample_latent(spec, a, all);
  const LatentCode y = sample_latent(spec, b, all);
  CHECK(x == y);
  CHECK(x.values == std::vector<double>{1, 2, 3, 4, 0, 14});
  for (auto r : x.roles) CHECK(r == FactorRole::inactive);
}

TEST_CASE("sample_latent rejects out-of-domain fixed values") {
  const FactorSpec spec = ProceduralRenderer::default_spec();
  Rng rng(3);
  CHECK_THROWS_AS(sample_latent(spec, rng, {{"wall_hue", 10}}), DomainError);
  CHECK_THROWS_AS(sample_latent(spec, rng, {{"wall_hue", 2.5}}), DomainError);
  CHECK_THROWS_AS(sample_latent(spec, rng, {{"nope", 0}}), DomainError);
}

TEST_CASE("sample_latent marginals are uniform (chi-square and 3 sigma)") {
  const FactorSpec spec = ProceduralRenderer::default_spec();
  Rng rng(2024);
  constexpr int kDraws = 10000;
  std::vector<std::vector<int>> counts(spec.size());
  for (std::size_t f = 0; f < spec.size(); ++f) counts[f].assign(static_cast<std::size_t>(spec[f].cardinality()), 0);
  for (int i = 0; i < kDraws; ++i) {
    const LatentCode c = sample_latent(spec, rng);
    for (std::size_t f = 0; f < spec.size(); ++f) ++counts[f][static_cast<std::size_t>(c.index(f))];
  }
  for (std::size_t f = 0; f < spec.size(); ++f) {
    const int k = spec[f].cardinality();
    const double p = 1.0 / k;
    const double expected = kDraws * p;
    const double sigma = std::sqrt(kDraws * p * (1 - p));
    double chi2 = 0;
    for (int c : counts[f]) {
      chi2 += (c - expected) * (c - expected) / expected;
      CHECK(std::abs(c - expected) <= 3 * sigma);
    }
    CHECK(chi2 < chi2_critical_999(k - 1));
  }
}

TEST_CASE("procedural renderer is deterministic and factor-local") {
  const LatentCode base = code_of({2, 5, 7, 3, 1, 6});
  const Observation a = render_procedural(base, 11);
  const Observation b = render_procedural(base, 11);
  CHECK(a.image == b.image);
  CHECK(a.image.height == 64);
  CHECK(a.image.width == 64);
  CHECK(a.image.channels == 3);
  for (float p : a.image.pixels) CHECK((p >= 0.0f && p <= 1.0f));

  SUBCASE("wall hue touches only the top band") {
    LatentCode other = base;
    other.values[1] = 8;
    const Observation c = render_procedural(other, 11);
    bool differs = false;
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int ch = 0; ch < 3; ++ch) {
          const bool d = a.image.at(y, x, ch) != c.image.at(y, x, ch);
          if (y >= ProceduralRenderer::kWallRows) CHECK_FALSE(d);
          differs = differs || d;
        }
      }
    }
    CHECK(differs);
  }
  SUBCASE("floor hue touches only the bottom band") {
    LatentCode other = base;
    other.values[0] = 9;
    const Observation c = render_procedural(other, 11);
    for (int y = 0; y < 64 - ProceduralRenderer::kFloorRows; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int ch = 0; ch < 3; ++ch) CHECK(a.image.at(y, x, ch) == c.image.at(y, x, ch));
      }
    }
    CHECK(a.image != c.image);
  }
}

TEST_CASE("changing exactly one factor changes the image") {
  const FactorSpec spec = ProceduralRenderer::default_spec();
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const LatentCode code = sample_latent(spec, rng);
    const Observation img = render_procedural(code, 0);
    for (std::size_t f = 0; f < spec.size(); ++f) {
      LatentCode other = code;
      other.values[f] = std::fmod(code.values[f] + 1, spec[f].cardinality());
      CHECK(render_procedural(other, 0).image != img.image);
    }
  }
}

TEST_CASE("3-level mini grid renders 729 pairwise-distinct images") {
  const FactorSpec full = ProceduralRenderer::default_spec();
  std::vector<Factor> factors;
  for (const auto& f : full.factors()) factors.push_back({f.name, DiscreteDomain{3}});
  auto renderer = std::make_shared<ProceduralRenderer>(FactorSpec(factors));
  const GridDataset grid(renderer, 0);
  REQUIRE(grid.size() == 729);
  std::set<std::vector<float>> seen;
  for (std::size_t i = 0; i < grid.size(); ++i) seen.insert(grid.observation(i).image.pixels);
  CHECK(seen.size() == 729);
}

TEST_CASE("sampled grid of 600 codes is injective") {
  const GridDataset grid(std::make_shared<ProceduralRenderer>(), 3);
  Rng rng(77);
  std::set<std::size_t> indices;
  while (indices.size() < 600) indices.insert(std::uniform_int_distribution<std::size_t>(0, grid.size() - 1)(rng));
  std::set<std::vector<float>> seen;
  for (auto i : indices) seen.insert(grid.observation(i).image.pixels);
  CHECK(seen.size() == indices.size());
}

TEST_CASE("renderer rejects mismatched specs") {
  CHECK_THROWS_AS(render_procedural(LatentCode{{0, 0, 0}, {FactorRole::active, FactorRole::active, FactorRole::active}}, 0),
                  ContractError);
  CHECK_THROWS_AS(ProceduralRenderer(FactorSpec({{"a", DiscreteDomain{2}}})), ContractError);
}

TEST_CASE("grid dataset indexing and matching") {
  const GridDataset grid(std::make_shared<ProceduralRenderer>(), 0);
  CHECK(grid.size() == 10u * 10 * 10 * 8 * 4 * 15);
  const std::size_t wall = grid.spec().index_of("wall_hue");
  const auto pool = grid.matching({{"wall_hue", 7}});
  CHECK(pool.size() == grid.size() / 10);
  for (std::size_t k = 0; k < pool.size(); k += 997) CHECK(grid.latent(pool[k]).values[wall] == 7);
  const auto exact = grid.matching({{"floor_hue", 1}, {"wall_hue", 2}, {"object_hue", 3},
                                    {"scale", 4},     {"shape", 0},    {"orientation", 14}});
  REQUIRE(exact.size() == 1);
  CHECK(grid.latent(exact[0]).values == std::vector<double>{1, 2, 3, 4, 0, 14});
}

TEST_CASE("grid dataset matches continuous factors by key bin") {
  auto glyphs = std::make_shared<GlyphRenderer>(16);
  const GridDataset grid(glyphs, 0, {{"rotation", 30}, {"hue", 4}});
  CHECK(grid.size() == static_cast<std::size_t>(GlyphRenderer::glyph_count()) * 30 * 4);
  const auto pool = grid.matching({{"instance", 2}, {"rotation", 0}});
  // 30 rotation levels fall two per key bin
  CHECK(pool.size() == 2 * 4);
  for (auto i : pool) {
    CHECK(grid.latent(i).values[0] == 2);
    CHECK(grid.spec()[1].key(grid.latent(i).values[1]) == 0);
  }
}

TEST_CASE("glyph renderer distinguishes instances and rotations") {
  const GlyphRenderer r(32);
  const auto code = [](double inst, double rot) {
    return LatentCode{{inst, rot, 0.3}, {FactorRole::active, FactorRole::active, FactorRole::active}};
  };
  std::set<std::vector<float>> seen;
  for (int g = 0; g < GlyphRenderer::glyph_count(); ++g) seen.insert(r.render(code(g, 0.5), 0).image.pixels);
  CHECK(seen.size() == static_cast<std::size_t>(GlyphRenderer::glyph_count()));
  CHECK(r.render(code(0, 0.5), 0).image == r.render(code(0, 0.5), 0).image);
  // no glyph looks the same after a half turn
  for (int g = 0; g < GlyphRenderer::glyph_count(); ++g) {
    CHECK(r.render(code(g, 0.5), 0).image != r.render(code(g, 0.5 + 3.14159265), 0).image);
  }
  const Observation o = r.render(code(1, 1.0), 0);
  CHECK(o.has_mask());
  CHECK(o.mask.size() == 32u * 32);
}

TEST_CASE("IDX ingestion") {
  const fs::path dir = temp_dir();

  SUBCASE("empty file is a parse error") {
    write_bytes(dir / "empty", {});
    CHECK_THROWS_AS(read_idx_images((dir / "empty").string()), ParseError);
  }
  SUBCASE("bad magic reports its byte offset") {
    auto b = idx_header(3, {1, 2, 2});
    b[2] = 0x0D;
    b.resize(b.size() + 4, 0);
    write_bytes(dir / "bad", b);
    try {
      read_idx_images((dir / "bad").string());
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.byte_offset() == 2);
    }
  }
  SUBCASE("truncated payload") {
    auto b = idx_header(3, {2, 2, 2});
    b.resize(b.size() + 5, 0);
    write_bytes(dir / "short", b);
    CHECK_THROWS_AS(read_idx_images((dir / "short").string()), ParseError);
  }
  SUBCASE("byte 17 of a one-image file is pixel (0,0)") {
    auto b = idx_header(3, {1, 2, 3});
    b.resize(b.size() + 6, 0);
    b[16] = 255;  // 17th byte, 1-based
    write_bytes(dir / "one", b);
    const auto imgs = read_idx_images((dir / "one").string());
    REQUIRE(imgs.size() == 1);
    CHECK(imgs[0].height == 2);
    CHECK(imgs[0].width == 3);
    CHECK(imgs[0].at(0, 0, 0) == 1.0f);
    CHECK(imgs[0].at(0, 1, 0) == 0.0f);
  }
  SUBCASE("labels group images and a class can be withheld") {
    auto img = idx_header(3, {5, 1, 1});
    for (std::uint8_t v : {0, 51, 102, 153, 204}) img.push_back(v);
    auto lab = idx_header(1, {5});
    for (std::uint8_t v : {0, 1, 2, 1, 2}) lab.push_back(v);
    write_bytes(dir / "img", img);
    write_bytes(dir / "lab", lab);
    const auto all = ingest_idx_images((dir / "img").string(), (dir / "lab").string());
    CHECK(all.dataset->size() == 5);
    CHECK(all.dataset->groups("label").size() == 3);
    const auto held = ingest_idx_images((dir / "img").string(), (dir / "lab").string(), 2);
    CHECK(held.dataset->size() == 3);
    CHECK(held.withheld.size() == 2);
    CHECK(held.withheld[0].image.at(0, 0, 0) == doctest::Approx(102 / 255.0));
    CHECK(held.dataset->matching({{"label", 1}}).size() == 2);
  }
  SUBCASE("label count must match image count") {
    auto img = idx_header(3, {2, 1, 1});
    img.push_back(0);
    img.push_back(1);
    auto lab = idx_header(1, {1});
    lab.push_back(0);
    write_bytes(dir / "img2", img);
    write_bytes(dir / "lab2", lab);
    CHECK_THROWS_AS(ingest_idx_images((dir / "img2").string(), (dir / "lab2").string()), ParseError);
  }
  fs::remove_all(dir);
}

TEST_CASE("MNIST training files ingest into ten labelled groups") {
  const char* root = std::getenv("ABC_DATA_ROOT");
  const fs::path base = fs::path(root ? root : "data") / "mnist";
  const fs::path images = base / "train-images-idx3-ubyte";
  const fs::path labels = base / "train-labels-idx1-ubyte";
  if (!fs::exists(images) || !fs::exists(labels)) {
    MESSAGE("MNIST files not present under " << base.string() << "; skipping");
    return;
  }
  const auto ingest = ingest_idx_images(images.string(), labels.string());
  const auto groups = ingest.dataset->groups("label");
  CHECK(groups.size() == 10);
  std::ifstream in(images, std::ios::binary);
  unsigned char header[8];
  in.read(reinterpret_cast<char*>(header), 8);
  const std::size_t declared = (std::size_t{header[4]} << 24) | (std::size_t{header[5]} << 16) |
                               (std::size_t{header[6]} << 8) | header[7];
  CHECK(ingest.dataset->size() == declared);
  CHECK(ingest.dataset->at(0).image.height == 28);
}

#ifdef ABC_HAVE_HDF5
TEST_CASE("Shapes3D archive reader") {
  REQUIRE(shapes3d_reader_available());
  const fs::path dir = temp_dir();
  const fs::path file = dir / "tiny_shapes3d.h5";
  {
    const hid_t f = H5Fcreate(file.string().c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT);
    const hsize_t idims[4] = {3, 4, 4, 3};
    std::vector<std::uint8_t> pixels(3 * 4 * 4 * 3);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<std::uint8_t>(i % 256);
    hid_t space = H5Screate_simple(4, idims, nullptr);
    hid_t ds = H5Dcreate2(f, "images", H5T_STD_U8LE, space, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT);
    H5Dwrite(ds, H5T_NATIVE_UINT8, H5S_ALL, H5S_ALL, H5P_DEFAULT, pixels.data());
    H5Dclose(ds);
    H5Sclose(space);
    const hsize_t ldims[2] = {3, 6};
    const double labels[18] = {0.0, 0.1, 0.2, 0.75, 0, -30,  //
                               0.1, 0.1, 0.2, 1.25, 3, 0,    //
                               0.0, 0.2, 0.3, 0.75, 1, 30};
    space = H5Screate_simple(2, ldims, nullptr);
    ds = H5Dcreate2(f, "labels", H5T_IEEE_F64LE, space, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT);
    H5Dwrite(ds, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, labels);
    H5Dclose(ds);
    H5Sclose(space);
    H5Fclose(f);
  }
  const auto archive = open_shapes3d_archive(file.string());
  CHECK(archive->size() == 3);
  CHECK(archive->spec().size() == 6);
  CHECK(archive->spec()[archive->spec().index_of("orientation")].cardinality() == 3);
  CHECK(archive->latent(2).values == std::vector<double>{0, 1, 1, 0, 1, 2});
  const Observation o = archive->observation(1);
  CHECK(o.image.height == 4);
  CHECK(o.image.pixels[0] == doctest::Approx(48 / 255.0));
  CHECK(archive->matching({{"floor_hue", 0}}).size() == 2);
  CHECK_THROWS_AS(open_shapes3d_archive((dir / "missing.h5").string()), ConfigError);
  fs::remove_all(dir);
}
#endif
