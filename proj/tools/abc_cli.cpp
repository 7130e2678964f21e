// abc: run, sweep, probe, plot and ingest experiments from JSON configs.
//
// Exit codes: 0 success, 1 unexpected failure, 2 invalid config or usage,
// 3 missing artifact, 4 numerical failure, 5 other library error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "abc/augmentations.hpp"
#include "abc/errors.hpp"
#include "abc/experiment.hpp"
#include "abc/plots.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace abc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-s,--seed", c.seed, "override training.seed");
  cmd->add_option("-o,--output", c.output, "override output_dir");
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = ExperimentConfig::load(c.config);
  if (c.seed) cfg.training.seed = *c.seed;
  if (!c.output.empty()) cfg.output_dir = c.output;
  cfg.validate();
  return cfg;
}

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

void write_manifest(const fs::path& out_dir, json manifest) {
  fs::create_directories(out_dir);
  const std::string id = fnv1a_hex(manifest.dump());
  manifest["manifest_id"] = id;
  const fs::path path = out_dir / ("ingest-" + manifest.at("kind").get<std::string>() + "-" + id + ".json");
  std::ofstream(path) << manifest.dump(2) << '\n';
  std::cout << path.string() << '\n';
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const MissingArtifactError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const Error*>(&e)) return 5;
  return 1;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Set-supervised representation learning experiments"};
  app.require_subcommand(1);

  Common run_opts;
  auto* run = app.add_subcommand("run", "train, probe and plot one experiment");
  add_common(run, run_opts);

  Common sweep_opts;
  std::string axis, values_text, seeds_text;
  auto* sw = app.add_subcommand("sweep", "one run per axis value and seed, aggregated into a CSV table");
  add_common(sw, sweep_opts);
  sw->add_option("-a,--axis", axis, "config field, e.g. curation.set_size")->required();
  sw->add_option("-v,--values", values_text, "comma-separated JSON values")->required();
  sw->add_option("--seeds", seeds_text, "comma-separated training seeds");

  std::string probe_dir;
  Common probe_opts;
  auto* probe = app.add_subcommand("probe", "re-run the probes of a trained run");
  probe->add_option("-r,--run", probe_dir, "run directory");
  probe->add_option("-c,--config", probe_opts.config, "config locating the run directory");
  probe->add_option("-s,--seed", probe_opts.seed, "override training.seed");
  probe->add_option("-o,--output", probe_opts.output, "override output_dir");

  std::string plot_dir, plot_kinds = "pca";
  auto* plot = app.add_subcommand("plot", "emit figures from a run directory");
  plot->add_option("-r,--run", plot_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  plot->add_option("-k,--kinds", plot_kinds, "comma-separated: pca, mi_sigma, retrieval");

  std::string idx_images, idx_labels, archive, bg_dir, ingest_out = ".";
  std::optional<int> withheld;
  auto* ingest = app.add_subcommand("ingest", "validate a data source and write a manifest");
  ingest->add_option("--idx-images", idx_images, "IDX image file");
  ingest->add_option("--idx-labels", idx_labels, "IDX label file");
  ingest->add_option("--withheld", withheld, "label kept out of training");
  ingest->add_option("--shapes3d", archive, "Shapes3D HDF5 archive");
  ingest->add_option("--backgrounds", bg_dir, "directory of background images");
  ingest->add_option("-o,--output", ingest_out, "manifest directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const RunResult r = run_experiment(load_config(run_opts));
      std::cout << r.directory.string() << '\n' << r.report.dump(2) << '\n';
    } else if (*sw) {
      const ExperimentConfig cfg = load_config(sweep_opts);
      std::vector<json> values;
      for (const auto& v : split_list(values_text)) {
        try {
          values.push_back(json::parse(v));
        } catch (const json::parse_error&) {
          values.push_back(v);  // bare word: a string value
        }
      }
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(seeds_text)) seeds.push_back(std::stoull(s));
      const SweepResult r = sweep(cfg, axis, values, seeds);
      std::cout << r.table.string() << '\n';
    } else if (*probe) {
      fs::path dir = probe_dir;
      if (dir.empty()) {
        if (probe_opts.config.empty()) throw ConfigError("probe needs --run or --config");
        dir = load_config(probe_opts).run_directory();
      }
      const RunResult r = probe_run(dir);
      std::cout << r.report.dump(2) << '\n';
    } else if (*plot) {
      for (const auto& p : emit_plots(plot_dir, split_list(plot_kinds))) std::cout << p.string() << '\n';
    } else if (*ingest) {
      int sources = 0;
      if (!idx_images.empty() || !idx_labels.empty()) {
        ++sources;
        if (idx_images.empty() || idx_labels.empty()) throw ConfigError("--idx-images and --idx-labels go together");
        const fs::path images = resolve_data_path(idx_images), labels = resolve_data_path(idx_labels);
        const IdxIngest in = ingest_idx_images(images.string(), labels.string(), withheld);
        std::map<std::string, std::size_t> counts;
        for (const auto& [key, members] : in.dataset->groups("label")) counts[std::to_string(key)] = members.size();
        write_manifest(ingest_out, {{"kind", "idx"},
                                    {"images", images.string()},
                                    {"labels", labels.string()},
                                    {"images_digest", file_digest(images)},
                                    {"labels_digest", file_digest(labels)},
                                    {"count", in.dataset->size() + in.withheld.size()},
                                    {"per_class", counts},
                                    {"withheld", withheld ? json(*withheld) : json(nullptr)},
                                    {"withheld_count", in.withheld.size()}});
      }
      if (!archive.empty()) {
        ++sources;
        const fs::path p = resolve_data_path(archive);
        if (!fs::exists(p)) throw MissingArtifactError("archive not found: '" + p.string() + "'");
        const auto ds = open_shapes3d_archive(p.string());
        json factors = json::array();
        for (const auto& f : ds->spec().factors()) factors.push_back(f.name);
        write_manifest(ingest_out, {{"kind", "shapes3d"}, {"archive", p.string()}, {"bytes", fs::file_size(p)},
                                    {"count", ds->size()}, {"factors", factors}});
      }
      if (!bg_dir.empty()) {
        ++sources;
        const fs::path p = resolve_data_path(bg_dir);
        const BackgroundPool pool = BackgroundPool::load_directory(p.string());
        write_manifest(ingest_out, {{"kind", "backgrounds"}, {"directory", p.string()}, {"count", pool.size()}});
      }
      if (sources == 0) throw ConfigError("ingest needs --idx-images/--idx-labels, --shapes3d or --backgrounds");
    }
  } catch (const std::exception& e) {
    std::cerr << "abc: " << e.what() << '\n';
    return exit_code(e);
  }
  return 0;
}
