#pragma once

// Declarative experiment runner: JSON configs, run directories keyed by the
// config hash, training metrics, probe reports and sweeps.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abc/probes.hpp"
#include "abc/set_curation.hpp"
#include "abc/trainer.hpp"

namespace abc {

inline constexpr int kExperimentSchemaVersion = 1;

// Relative dataset paths resolve against $ABC_DATA_ROOT (or the working
// directory when unset).
std::filesystem::path data_root();
std::filesystem::path resolve_data_path(const std::string& path);

struct DatasetBlock {
  std::string kind = "procedural";  // procedural | glyph | mnist | shapes3d
  std::uint64_t render_seed = 0;
  std::map<std::string, int> resolution;  // grid levels of continuous factors
  int canvas = 32;                        // glyph
  std::string path;                       // mnist: IDX directory, shapes3d: archive
  std::optional<int> withheld_label;      // mnist
  std::string held_out_factor = "instance";
  std::vector<int> held_out;  // keys of held_out_factor kept out of training

  bool operator==(const DatasetBlock&) const = default;
};

struct CurationBlock {
  std::vector<std::string> inactive;
  std::size_t set_size = 32;
  bool unconstrained_b = false;  // ABC-X
  TitrationSchedule titration;
  std::optional<DatasetBlock> extraneous;
};

struct LossBlock {
  SimilarityMetric metric{MetricKind::negative_squared_euclidean};
  double tau = 1.0;
  bool double_augmentation = false;
  TransformSpec augmentation;
  std::string background_dir;  // background paint pool
  LossWeights weights;
  std::vector<std::string> regression_factors;
};

struct TrainingBlock {
  std::int64_t steps = 0;
  StaircaseSchedule lr;
  int pairs_per_step = 1;
  std::uint64_t seed = 0;
  std::string dtype = "float32";
  std::int64_t checkpoint_every = 0;
};

struct CodebookBlock {
  bool enabled = false;
  std::string rotation_factor = "rotation";
  std::size_t pool = 1000;
  std::size_t queries = 500;
  std::size_t size = 100;
  int count = 10;
  std::vector<double> thresholds{10.0, 15.0, 30.0};
};

struct MineBlock {
  bool enabled = false;
  MineBudget budget;
  int sweep_points = 0;  // MI-vs-sigma curve, log spaced
  double sweep_lo = 0.01;
  double sweep_hi = 10.0;
};

struct ProbeBlock {
  std::uint64_t seed = 0;
  std::size_t samples = 3000;
  std::optional<double> sigma;  // unset: the loss's characteristic scale
  std::vector<std::string> factors;  // empty: every factor
  bool classifier = true;
  ClassifierBudget classifier_budget;
  MineBlock mine;
  CodebookBlock codebook;
  bool style = false;  // PC1 of withheld embeddings vs mean ink
  std::size_t dump_limit = 10000;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetBlock dataset;
  CurationBlock curation;
  LossBlock loss;
  EncoderConfig encoder;
  TrainingBlock training;
  ProbeBlock probe;
  std::vector<std::string> plots;  // pca | mi_sigma | retrieval
  std::string output_dir = "runs";

  // Throws SchemaError on unknown keys, wrong types or a missing or
  // unsupported schema_version; ConfigError on invalid values.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  // 16 hex digits over the canonical JSON without output_dir.
  std::string hash() const;
  void validate() const;

  TrainConfig train_config() const;
  double probe_sigma() const;
  std::filesystem::path run_directory() const;
};

// Datasets referenced by a config, opened once.
struct ExperimentData {
  std::shared_ptr<const Dataset> full;      // every element
  std::shared_ptr<const Dataset> train;     // held-out keys / withheld class removed
  std::shared_ptr<const Dataset> extraneous;
  std::vector<Observation> withheld;        // mnist withheld class
  std::shared_ptr<const BackgroundPool> backgrounds;
};

// Throws MissingArtifactError for unresolvable files.
ExperimentData open_experiment_data(const ExperimentConfig& config);
PairSource make_pair_source(const ExperimentConfig& config, const ExperimentData& data);

// Evaluation sample for probes and plots.
struct ProbeSample {
  std::vector<Observation> observations;
  std::vector<LatentCode> latents;
};
ProbeSample draw_probe_sample(const ExperimentConfig& config, const ExperimentData& data);

// Runs every enabled probe on a trained encoder and writes report.json,
// embeddings.csv and the optional mi_sweep.csv / codebook.csv into `run_dir`.
nlohmann::json run_probes(const ExperimentConfig& config, const ExperimentData& data, Encoder& encoder,
                          const std::filesystem::path& run_dir);

// Scalar report entries keyed by dotted path ("classifier.wall_hue.accuracy").
std::map<std::string, double> flatten_report(const nlohmann::json& report);

struct RunResult {
  std::filesystem::path directory;
  nlohmann::json report;
  double train_seconds = 0.0;
  double probe_seconds = 0.0;
};

// Trains, probes and plots. Writes config.json, metrics.jsonl, timing.jsonl,
// checkpoint.pt, report.json and the declared plots into run_directory().
// On failure a FAILED marker with the error is left next to whatever
// artifacts were already written, and the error propagates.
RunResult run_experiment(const ExperimentConfig& config);

// Reloads config.json and checkpoint.pt from a run directory and reprobes.
RunResult probe_run(const std::filesystem::path& run_dir);

struct SweepCell {
  nlohmann::json value;
  std::string metric;
  double mean = 0.0;
  double standard_error = 0.0;  // sample sd / sqrt(n); 0 for a single run
  int runs = 0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<RunResult> runs;  // value-major, seed-minor
  std::filesystem::path table;
};

// `axis` is a dotted path or JSON pointer into the config JSON (e.g.
// "curation.set_size"). Seeds override training.seed; empty keeps the
// config's own seed. Throws SchemaError when the axis does not exist.
SweepResult sweep(const ExperimentConfig& config, const std::string& axis, const std::vector<nlohmann::json>& values,
                  const std::vector<std::uint64_t>& seeds = {});

ExperimentConfig with_override(const ExperimentConfig& config, const std::string& axis, const nlohmann::json& value);

}  // namespace abc
