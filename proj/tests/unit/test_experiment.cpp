#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "../support/doctest_torch.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "abc/errors.hpp"
#include "abc/experiment.hpp"
#include "abc/plots.hpp"
#include "abc/stats.hpp"

using namespace abc;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kSource = ABC_SOURCE_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("abc_experiment_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json smoke_json() {
  std::ifstream in(kSource / "configs" / "smoke.json");
  return json::parse(in);
}

ExperimentConfig smoke(const fs::path& out, int steps = 3) {
  ExperimentConfig c = ExperimentConfig::from_json(smoke_json());
  c.output_dir = out.string();
  c.training.steps = steps;
  c.plots.clear();
  return c;
}

}  // namespace

TEST_CASE("subset datasets hide excluded keys") {
  auto grid = std::make_shared<GridDataset>(std::make_shared<GlyphRenderer>(16), 0,
                                            std::map<std::string, int>{{"rotation", 4}, {"hue", 2}});
  const auto sub = SubsetDataset::excluding(grid, "instance", {0, 5});
  CHECK(sub->size() == grid->size() / 12 * 10);
  for (std::size_t i = 0; i < sub->size(); ++i) {
    const int inst = sub->latent(i).index(0);
    CHECK(inst != 0);
    CHECK(inst != 5);
    CHECK(sub->latent(i) == grid->latent(sub->base_index(i)));
  }
  CHECK(sub->matching({{"instance", 5}}).empty());
  const auto m = sub->matching({{"instance", 3}});
  CHECK(m.size() == 8);
  for (std::size_t i : m) CHECK(sub->latent(i).index(0) == 3);
  CHECK(present_keys(*sub, "instance").size() == 10);
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const SetBatch b = sample_pair(*sub, {"instance"}, 4, rng);
    CHECK(b.inactive_a->at("instance") != 0);
    CHECK(b.inactive_b->at("instance") != 5);
  }
  CHECK_THROWS_AS(SubsetDataset(grid, {grid->size()}), ContractError);
}

TEST_CASE("configs round-trip and hash deterministically") {
  const ExperimentConfig c = ExperimentConfig::from_json(smoke_json());
  const json j = c.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.hash() == c.hash());
  CHECK(c.hash().size() == 16);

  ExperimentConfig moved = c;
  moved.output_dir = "elsewhere";
  CHECK(moved.hash() == c.hash());
  ExperimentConfig reseeded = c;
  reseeded.training.seed = 99;
  CHECK(reseeded.hash() != c.hash());

  for (const char* name : {"procedural_wall_inactive.json", "procedural_wall_inactive_x.json",
                           "procedural_hues_inactive.json", "mnist_style.json", "glyph_pose.json"}) {
    CAPTURE(name);
    const ExperimentConfig shipped = ExperimentConfig::load(kSource / "configs" / name);
    CHECK(ExperimentConfig::from_json(shipped.to_json()).hash() == shipped.hash());
  }
}

TEST_CASE("schema violations are rejected before any compute") {
  const fs::path out = scratch("schema");
  auto rejects = [&](json j) {
    j["output_dir"] = out.string();
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), SchemaError);
  };
  json j = smoke_json();
  j.erase("schema_version");
  rejects(j);
  j = smoke_json();
  j["schema_version"] = 2;
  rejects(j);
  j = smoke_json();
  j["surprise"] = 1;
  rejects(j);
  j = smoke_json();
  j["curation"]["set_size"] = "eight";
  rejects(j);
  j = smoke_json();
  j["curation"]["set_size"] = 8.5;
  rejects(j);
  j = smoke_json();
  j["curation"]["inactive"] = {"wall_hue"};
  rejects(j);
  j = smoke_json();
  j["plots"] = {"histogram"};
  rejects(j);
  j = smoke_json();
  j["encoder"]["input"] = {32, 32, 3};
  rejects(j);
  j = smoke_json();
  j["loss"]["metric"] = "manhattan";
  rejects(j);
  j = smoke_json();
  j["probe"]["codebook"]["pool"] = 10;  // smaller than the codebook
  rejects(j);
  j = smoke_json();
  j["dataset"]["held_out"] = {12};
  rejects(j);
  j = smoke_json();
  j["training"]["steps"] = -1;
  rejects(j);
  CHECK(fs::is_empty(out));
}

TEST_CASE("zero steps report the untrained encoder") {
  const fs::path out = scratch("baseline");
  const ExperimentConfig c = smoke(out, 0);
  const RunResult r = run_experiment(c);
  CHECK(r.directory == c.run_directory());
  for (const char* f : {"config.json", "metrics.jsonl", "timing.jsonl", "checkpoint.pt", "report.json", "embeddings.csv",
                        "codebook.csv"}) {
    CAPTURE(f);
    CHECK(fs::exists(r.directory / f));
  }
  CHECK(!fs::exists(r.directory / "FAILED"));
  CHECK(slurp(r.directory / "metrics.jsonl").empty());
  CHECK(r.report.at("config_hash") == c.hash());
  CHECK(json::parse(slurp(r.directory / "report.json")) == r.report);
  CHECK(json::parse(slurp(r.directory / "config.json")).at("config_hash") == c.hash());
  CHECK(r.report.at("classifier").contains("instance"));
  CHECK(r.report.at("classifier").at("instance").at("classes") == 3);  // held-out instances only
  CHECK(r.report.at("codebook").contains("acc@30"));

  // the untrained weights are the seeded initialization
  const Encoder fresh(c.encoder, c.training.seed);
  TrainState saved = TrainState::load((r.directory / "checkpoint.pt").string(), c.train_config());
  const auto a = fresh->named_parameters(), b = saved.encoder->named_parameters();
  for (const auto& p : a) CHECK(torch::equal(p.value(), b[p.key()]));

  // reprobing the same checkpoint gives the same report
  CHECK(probe_run(r.directory).report == r.report);
}

TEST_CASE("same config and seed give byte-identical metrics") {
  const ExperimentConfig a = smoke(scratch("det_a"), 4);
  const ExperimentConfig b = smoke(scratch("det_b"), 4);
  const RunResult ra = run_experiment(a), rb = run_experiment(b);
  const std::string ma = slurp(ra.directory / "metrics.jsonl");
  CHECK(!ma.empty());
  CHECK(ma == slurp(rb.directory / "metrics.jsonl"));
  CHECK(slurp(ra.directory / "report.json") == slurp(rb.directory / "report.json"));
  CHECK(slurp(ra.directory / "embeddings.csv") == slurp(rb.directory / "embeddings.csv"));

  std::istringstream lines(ma);
  std::int64_t expected = 0;
  for (std::string line; std::getline(lines, line);) {
    const json rec = json::parse(line);
    CHECK(rec.at("step") == expected++);
    CHECK(rec.at("config_hash") == a.hash());
  }
  CHECK(expected == 4);
}

TEST_CASE("mid-run failures leave a marker next to partial artifacts") {
  const fs::path out = scratch("failure");
  json j = smoke_json();
  j["dataset"] = {{"kind", "mnist"}, {"path", (out / "no_such_mnist").string()}};
  j["curation"]["inactive"] = {"label"};
  j["encoder"] = {{"preset", "mnist"}, {"embedding_dim", 8}};
  j["loss"]["double_augmentation"] = false;
  j["probe"] = {{"samples", 10}};
  j["plots"] = json::array();
  j["output_dir"] = out.string();
  const ExperimentConfig c = ExperimentConfig::from_json(j);
  CHECK_THROWS_AS(run_experiment(c), MissingArtifactError);
  const json marker = json::parse(slurp(c.run_directory() / "FAILED"));
  CHECK(marker.at("error") == "missing_artifact");
  CHECK(marker.at("config_hash") == c.hash());
  CHECK(fs::exists(c.run_directory() / "config.json"));
  CHECK(!fs::exists(c.run_directory() / "report.json"));
}

TEST_CASE("report flattening") {
  const json r = {{"config_hash", "x"},
                  {"sigma", 1.0},
                  {"classifier", {{"hue", {{"accuracy", 0.5}, {"inactive", false}}}}},
                  {"codebook", {{"acc@30", 0.9}, {"per_codebook", json::array({{{"median", 3.0}}})}}}};
  const auto flat = flatten_report(r);
  CHECK(flat.size() == 3);
  CHECK(flat.at("classifier.hue.accuracy") == 0.5);
  CHECK(flat.at("codebook.acc@30") == 0.9);
  CHECK(flat.at("sigma") == 1.0);
}

TEST_CASE("sweeps cross seeds and aggregate per cell") {
  const fs::path out = scratch("sweep");
  const ExperimentConfig base = smoke(out, 2);

  SUBCASE("unknown axes are schema errors") {
    CHECK_THROWS_AS(sweep(base, "curation.set_sizes", {4, 8}), SchemaError);
    CHECK_THROWS_AS(sweep(base, "curation.set_size", {}), SchemaError);
    CHECK_THROWS_AS(sweep(base, "curation.set_size", {"big"}), SchemaError);
    CHECK(fs::is_empty(out));
  }

  SUBCASE("cell means equal manual averages of the per-run reports") {
    const SweepResult r = sweep(base, "curation.set_size", {4, 6}, {1, 2});
    REQUIRE(r.runs.size() == 4);
    CHECK(fs::exists(r.table));
    std::set<std::string> dirs;
    for (const auto& run : r.runs) dirs.insert(run.directory.string());
    CHECK(dirs.size() == 4);
    for (const auto& cell : r.cells) {
      const std::size_t v = cell.value == 4 ? 0 : 1;
      const json rep0 = json::parse(slurp(r.runs[2 * v].directory / "report.json"));
      const json rep1 = json::parse(slurp(r.runs[2 * v + 1].directory / "report.json"));
      const double x0 = flatten_report(rep0).at(cell.metric), x1 = flatten_report(rep1).at(cell.metric);
      CHECK(cell.runs == 2);
      CHECK(cell.mean == doctest::Approx((x0 + x1) / 2).epsilon(1e-12));
      // sample sd / sqrt(2) = |x0 - x1| / 2
      CHECK(cell.standard_error == doctest::Approx(std::abs(x0 - x1) / 2).epsilon(1e-9));
    }
    CHECK(r.cells.size() % 2 == 0);
    std::istringstream csv(slurp(r.table));
    std::string header;
    std::getline(csv, header);
    CHECK(header == "config_hash,axis,value,metric,mean,standard_error,runs");
    std::size_t rows = 0;
    for (std::string line; std::getline(csv, line);) {
      CHECK(line.rfind(base.hash() + ",", 0) == 0);
      ++rows;
    }
    CHECK(rows == r.cells.size());
  }

  SUBCASE("a one-point sweep equals the single run") {
    const SweepResult r = sweep(base, "curation.set_size", {8});
    const RunResult single = run_experiment(base);
    const auto flat = flatten_report(single.report);
    CHECK(r.cells.size() == flat.size());
    for (const auto& cell : r.cells) {
      CHECK(cell.runs == 1);
      CHECK(cell.standard_error == 0.0);
      CHECK(cell.mean == flat.at(cell.metric));
    }
  }
}

TEST_CASE("pca variance fractions") {
  torch::manual_seed(0);
  SUBCASE("match the eigenvalue sum and find informative dimensions") {
    torch::Tensor x = torch::randn({500, 6}, torch::kFloat64) * 0.01;
    x.select(1, 2) += torch::linspace(-3, 3, 500, torch::kFloat64);
    x.select(1, 4) += torch::sin(torch::linspace(0, 20, 500, torch::kFloat64));
    const Pca p = fit_pca(x);
    double sum = 0;
    for (double f : p.fractions) sum += f;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    // trace of the covariance equals the eigenvalue sum
    const torch::Tensor c = x - x.mean(0);
    const double trace = (c * c).sum().item<double>() / 499.0;
    CHECK(p.variances.sum().item<double>() == doctest::Approx(trace).epsilon(1e-10));
    CHECK(p.fractions[0] + p.fractions[1] > 0.99);
    CHECK(std::abs(p.components[2][0].item<double>()) > 0.99);
    CHECK(std::abs(p.components[4][1].item<double>()) > 0.99);
  }
  SUBCASE("identical rows do not crash") {
    const Pca p = fit_pca(torch::ones({10, 4}, torch::kFloat64));
    double sum = 0;
    for (double f : p.fractions) sum += f;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    CHECK(p.project(torch::ones({10, 4}), 2).abs().max().item<double>() == 0.0);
  }
  CHECK_THROWS_AS(fit_pca(torch::ones({1, 4})), ContractError);
}

TEST_CASE("spearman rank correlation") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 3, 4, 5}, {5, 6, 7, 8, 7}) == doctest::Approx(0.8207826816681233).epsilon(1e-12));
  CHECK(spearman({3, 1, 2, 2, 5, 4}, {10, 20, 20, 30, 5, 1}) ==
        doctest::Approx(-0.8088235294117647).epsilon(1e-12));
  CHECK_THROWS_AS(spearman({1, 1, 1}, {1, 2, 3}), DomainError);
  CHECK_THROWS_AS(spearman({1, 2}, {1}), ContractError);
}

TEST_CASE("plots") {
  const fs::path out = scratch("plots");

  SUBCASE("missing artifacts are listed by name") {
    const fs::path empty = out / "empty";
    fs::create_directories(empty);
    try {
      emit_plots(empty, {"pca", "mi_sigma"});
      FAIL("expected MissingArtifactError");
    } catch (const MissingArtifactError& e) {
      const std::string what = e.what();
      CHECK(what.find("config.json") != std::string::npos);
      CHECK(what.find("embeddings.csv") != std::string::npos);
      CHECK(what.find("mi_sweep.csv") != std::string::npos);
    }
  }

  SUBCASE("hand-made artifacts, including a degenerate dump") {
    const ExperimentConfig c = smoke(out);
    const fs::path dir = out / "manual";
    fs::create_directories(dir);
    json cfg = c.to_json();
    std::ofstream(dir / "config.json") << cfg.dump(2);
    {
      std::ofstream e(dir / "embeddings.csv");
      e << "config_hash,index,e0,e1,e2,instance,rotation,hue\n";
      for (int i = 0; i < 20; ++i) e << c.hash() << ',' << i << ",0.5,0.5,0.5," << i % 3 << ',' << 0.1 * i << ",0.2\n";
    }
    {
      std::ofstream m(dir / "mi_sweep.csv");
      m << "config_hash,factor,inactive,sigma,nats,raw\n";
      for (int k = 0; k < 5; ++k) {
        const double s = std::pow(10.0, -2 + k);
        m << c.hash() << ",rotation,0," << s << ',' << 2.0 / (1 + s) << ",0\n";
        m << c.hash() << ",instance,1," << s << ',' << 0.3 / (1 + 10 * s) << ",0\n";
      }
    }
    const auto files = emit_plots(dir, {"pca", "mi_sigma"});
    REQUIRE(files.size() == 2);
    for (const auto& f : files) {
      CHECK(fs::file_size(f) > 0);
      CHECK(f.filename().string().find(c.hash()) != std::string::npos);
    }
    const json meta = json::parse(slurp(dir / ("pca-" + c.hash() + ".json")));
    double sum = 0;
    for (double f : meta.at("fractions")) sum += f;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    // deterministic bytes
    const std::string first = slurp(files[0]);
    emit_plots(dir, {"pca"});
    CHECK(slurp(files[0]) == first);
  }

  SUBCASE("retrieval grid from a trained run") {
    ExperimentConfig c = smoke(out, 2);
    c.plots = {"pca", "retrieval"};
    const RunResult r = run_experiment(c);
    CHECK(fs::exists(r.directory / ("pca-" + c.hash() + ".png")));
    CHECK(fs::exists(r.directory / ("retrieval-" + c.hash() + ".png")));
    CHECK_THROWS_AS(emit_plots(r.directory, {"scatter3d"}), ConfigError);
  }
}
