#include "abc/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <type_traits>

#include "abc/errors.hpp"
#include "abc/plots.hpp"
#include "abc/stats.hpp"

namespace abc {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads an object field by field; anything left unread at done() is an
// unknown key.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw SchemaError(where_ + ": expected an object");
  }

  template <class T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer() && !it->is_number_unsigned()) throw SchemaError(at(key) + ": expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && it->template get<std::int64_t>() < 0) {
            throw SchemaError(at(key) + ": expected a non-negative integer");
          }
        }
      }
      if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw SchemaError(at(key) + ": expected a number");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw SchemaError(at(key) + ": " + e.what());
    }
  }

  template <class T>
  void read(const std::string& key, std::optional<T>& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) {
      out.reset();
      return;
    }
    T v{};
    read(key, v);
    out = v;
  }

  void read(const std::string& key, Range& out) {
    std::vector<double> v{out.lo, out.hi};
    read(key, v);
    if (v.size() != 2) throw SchemaError(at(key) + ": expected [lo, hi]");
    out = {v[0], v[1]};
  }

  const json* child(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void ignore(const std::string& key) { used_.insert(key); }

  void done() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw SchemaError(where_ + ": unknown key '" + k + "'");
    }
  }

  std::string at(const std::string& key) const { return where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

json range_json(const Range& r) { return {r.lo, r.hi}; }

json dataset_json(const DatasetBlock& d) {
  return {{"kind", d.kind},
          {"render_seed", d.render_seed},
          {"resolution", d.resolution},
          {"canvas", d.canvas},
          {"path", d.path},
          {"withheld_label", d.withheld_label ? json(*d.withheld_label) : json(nullptr)},
          {"held_out_factor", d.held_out_factor},
          {"held_out", d.held_out}};
}

DatasetBlock dataset_from(const json& j, const std::string& where) {
  DatasetBlock d;
  Fields f(j, where);
  f.read("kind", d.kind);
  f.read("render_seed", d.render_seed);
  f.read("resolution", d.resolution);
  f.read("canvas", d.canvas);
  f.read("path", d.path);
  f.read("withheld_label", d.withheld_label);
  f.read("held_out_factor", d.held_out_factor);
  f.read("held_out", d.held_out);
  f.done();
  return d;
}

json augmentation_json(const TransformSpec& t, const std::string& background_dir) {
  return {{"translate", t.translate},     {"crop_translate_amplitude", t.crop_translate_amplitude},
          {"brightness", t.brightness},   {"brightness_delta", range_json(t.brightness_delta)},
          {"hue", t.hue},                 {"hue_delta", range_json(t.hue_delta)},
          {"noise", t.noise},             {"pixel_noise_std", t.pixel_noise_std},
          {"edge_mix", t.edge_mix},       {"edge_mix_weight", range_json(t.edge_mix_weight)},
          {"background_paint", t.background_paint}, {"background_dir", background_dir}};
}

EncoderConfig encoder_from(const json& j) {
  if (!j.is_object()) throw SchemaError("encoder: expected an object");
  if (!j.contains("preset")) return EncoderConfig::from_json(j);
  Fields f(j, "encoder");
  std::string preset;
  int embedding_dim = 0, canvas = 32;
  std::string backbone;
  f.read("preset", preset);
  f.read("embedding_dim", embedding_dim);
  f.read("canvas", canvas);
  f.read("backbone", backbone);
  f.done();
  if (preset == "shapes3d") return EncoderConfig::shapes3d();
  if (preset == "mnist") return EncoderConfig::mnist(embedding_dim > 0 ? embedding_dim : 8);
  if (preset == "pose") return EncoderConfig::pose(backbone);
  if (preset == "procedural_desk") return EncoderConfig::procedural_desk(embedding_dim > 0 ? embedding_dim : 64);
  if (preset == "glyph_desk") return EncoderConfig::glyph_desk(canvas, embedding_dim > 0 ? embedding_dim : 32);
  throw SchemaError("encoder: unknown preset '" + preset + "'");
}

const std::set<std::string> kDatasetKinds{"procedural", "glyph", "mnist", "shapes3d"};
const std::set<std::string> kPlotKinds{"pca", "mi_sigma", "retrieval"};

// Factor spec of a dataset block, known without touching the disk except
// for the Shapes3D archive (whose labels are fixed by the format).
FactorSpec block_spec(const DatasetBlock& d) {
  if (d.kind == "glyph") return GlyphRenderer(d.canvas).spec();
  if (d.kind == "mnist") return FactorSpec({{"label", DiscreteDomain{10}}});
  return ProceduralRenderer::default_spec();
}

InputShape block_shape(const DatasetBlock& d) {
  if (d.kind == "glyph") return {d.canvas, d.canvas, 3};
  if (d.kind == "mnist") return {28, 28, 1};
  return {64, 64, 3};
}

void validate_dataset(const DatasetBlock& d, const std::string& where) {
  if (!kDatasetKinds.count(d.kind)) throw SchemaError(where + ".kind: unknown dataset kind '" + d.kind + "'");
  if ((d.kind == "mnist" || d.kind == "shapes3d") && d.path.empty()) {
    throw SchemaError(where + ".path: required for " + d.kind);
  }
  if (d.kind == "glyph" && d.canvas < 8) throw SchemaError(where + ".canvas: must be >= 8");
  const FactorSpec spec = block_spec(d);
  for (const auto& [name, levels] : d.resolution) {
    const auto idx = spec.find(name);
    if (!idx || spec[*idx].is_discrete()) {
      throw SchemaError(where + ".resolution: '" + name + "' is not a continuous factor");
    }
    if (levels < 1) throw SchemaError(where + ".resolution: levels must be >= 1");
  }
  if (d.withheld_label && d.kind != "mnist") throw SchemaError(where + ".withheld_label: only for mnist");
  if (!d.held_out.empty()) {
    const auto idx = spec.find(d.held_out_factor);
    if (!idx || !spec[*idx].is_discrete()) {
      throw SchemaError(where + ".held_out_factor: '" + d.held_out_factor + "' is not a discrete factor");
    }
    for (int k : d.held_out) {
      if (k < 0 || k >= spec[*idx].cardinality()) throw SchemaError(where + ".held_out: key out of range");
    }
  }
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const SchemaError*>(&e)) return "schema";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const MissingArtifactError*>(&e)) return "missing_artifact";
  if (dynamic_cast<const NumericalError*>(&e)) return "numerical";
  if (dynamic_cast<const CurationError*>(&e)) return "curation";
  if (dynamic_cast<const ProbeError*>(&e)) return "probe";
  if (dynamic_cast<const Error*>(&e)) return "library";
  return "runtime";
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

json::json_pointer axis_pointer(const std::string& axis) {
  if (axis.empty()) throw SchemaError("sweep axis is empty");
  if (axis.front() == '/') return json::json_pointer(axis);
  std::string p;
  std::stringstream ss(axis);
  for (std::string part; std::getline(ss, part, '.');) p += "/" + part;
  return json::json_pointer(p);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

fs::path data_root() {
  const char* env = std::getenv("ABC_DATA_ROOT");
  return env && *env ? fs::path(env) : fs::current_path();
}

fs::path resolve_data_path(const std::string& path) {
  const fs::path p(path);
  return p.is_absolute() ? p : data_root() / p;
}

// ---- ExperimentConfig ----

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Fields top(j, "config");
  int version = -1;
  if (!j.is_object() || !j.contains("schema_version")) throw SchemaError("config: missing schema_version");
  top.read("schema_version", version);
  if (version != kExperimentSchemaVersion) {
    throw SchemaError("config: unsupported schema_version " + std::to_string(version));
  }
  top.ignore("config_hash");  // informational copy written into run directories
  top.read("name", c.name);
  top.read("output_dir", c.output_dir);
  top.read("plots", c.plots);

  const json* d = top.child("dataset");
  if (!d) throw SchemaError("config: missing dataset block");
  c.dataset = dataset_from(*d, "dataset");

  if (const json* cu = top.child("curation")) {
    Fields f(*cu, "curation");
    f.read("inactive", c.curation.inactive);
    f.read("set_size", c.curation.set_size);
    f.read("unconstrained_b", c.curation.unconstrained_b);
    if (const json* t = f.child("titration")) {
      Fields tf(*t, "curation.titration");
      tf.read("final_fraction", c.curation.titration.final_fraction);
      tf.read("ramp_steps", c.curation.titration.ramp_steps);
      tf.read("step_interval", c.curation.titration.step_interval);
      tf.done();
    }
    if (const json* e = f.child("extraneous")) c.curation.extraneous = dataset_from(*e, "curation.extraneous");
    f.done();
  }

  if (const json* lo = top.child("loss")) {
    Fields f(*lo, "loss");
    std::string metric = c.loss.metric.name();
    f.read("metric", metric);
    try {
      c.loss.metric = SimilarityMetric::parse(metric);
    } catch (const Error& e) {
      throw SchemaError(std::string("loss.metric: ") + e.what());
    }
    c.loss.tau = c.loss.metric.default_tau();
    f.read("tau", c.loss.tau);
    f.read("double_augmentation", c.loss.double_augmentation);
    f.read("abc_weight", c.loss.weights.abc_weight);
    f.read("supervised_weight", c.loss.weights.supervised_weight);
    f.read("regression_factors", c.loss.regression_factors);
    if (const json* a = f.child("augmentation")) {
      Fields af(*a, "loss.augmentation");
      TransformSpec& t = c.loss.augmentation;
      af.read("translate", t.translate);
      af.read("crop_translate_amplitude", t.crop_translate_amplitude);
      af.read("brightness", t.brightness);
      af.read("brightness_delta", t.brightness_delta);
      af.read("hue", t.hue);
      af.read("hue_delta", t.hue_delta);
      af.read("noise", t.noise);
      af.read("pixel_noise_std", t.pixel_noise_std);
      af.read("edge_mix", t.edge_mix);
      af.read("edge_mix_weight", t.edge_mix_weight);
      af.read("background_paint", t.background_paint);
      af.read("background_dir", c.loss.background_dir);
      af.done();
    }
    f.done();
  }

  const json* en = top.child("encoder");
  if (!en) throw SchemaError("config: missing encoder block");
  c.encoder = encoder_from(*en);

  if (const json* tr = top.child("training")) {
    Fields f(*tr, "training");
    f.read("steps", c.training.steps);
    f.read("lr", c.training.lr.base);
    f.read("lr_decay_factor", c.training.lr.factor);
    f.read("lr_decay_interval", c.training.lr.interval);
    f.read("pairs_per_step", c.training.pairs_per_step);
    f.read("seed", c.training.seed);
    f.read("dtype", c.training.dtype);
    f.read("checkpoint_every", c.training.checkpoint_every);
    f.done();
  }

  if (const json* pr = top.child("probe")) {
    Fields f(*pr, "probe");
    ProbeBlock& p = c.probe;
    f.read("seed", p.seed);
    f.read("samples", p.samples);
    f.read("factors", p.factors);
    f.read("dump_limit", p.dump_limit);
    f.read("style", p.style);
    if (const json* s = f.child("sigma")) {
      if (s->is_string() && s->get<std::string>() == "characteristic") {
        p.sigma.reset();
      } else if (s->is_number()) {
        p.sigma = s->get<double>();
      } else {
        throw SchemaError("probe.sigma: expected a number or \"characteristic\"");
      }
    }
    if (const json* cl = f.child("classifier")) {
      Fields cf(*cl, "probe.classifier");
      cf.read("enabled", p.classifier);
      cf.read("batch", p.classifier_budget.batch);
      cf.read("steps", p.classifier_budget.steps);
      cf.read("lr", p.classifier_budget.lr);
      cf.read("test_fraction", p.classifier_budget.test_fraction);
      cf.done();
    }
    if (const json* mi = f.child("mine")) {
      Fields mf(*mi, "probe.mine");
      mf.read("enabled", p.mine.enabled);
      mf.read("batch", p.mine.budget.batch);
      mf.read("steps", p.mine.budget.steps);
      mf.read("lr", p.mine.budget.lr);
      mf.read("eval_samples", p.mine.budget.eval_samples);
      mf.read("sweep_points", p.mine.sweep_points);
      mf.read("sweep_lo", p.mine.sweep_lo);
      mf.read("sweep_hi", p.mine.sweep_hi);
      mf.done();
    }
    if (const json* cb = f.child("codebook")) {
      Fields bf(*cb, "probe.codebook");
      bf.read("enabled", p.codebook.enabled);
      bf.read("rotation_factor", p.codebook.rotation_factor);
      bf.read("pool", p.codebook.pool);
      bf.read("queries", p.codebook.queries);
      bf.read("size", p.codebook.size);
      bf.read("count", p.codebook.count);
      bf.read("thresholds", p.codebook.thresholds);
      bf.done();
    }
    f.done();
  }
  top.done();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("config file not found: '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json j;
  j["schema_version"] = kExperimentSchemaVersion;
  j["name"] = name;
  j["dataset"] = dataset_json(dataset);
  j["curation"] = {{"inactive", curation.inactive},
                   {"set_size", curation.set_size},
                   {"unconstrained_b", curation.unconstrained_b},
                   {"titration",
                    {{"final_fraction", curation.titration.final_fraction},
                     {"ramp_steps", curation.titration.ramp_steps},
                     {"step_interval", curation.titration.step_interval}}},
                   {"extraneous", curation.extraneous ? dataset_json(*curation.extraneous) : json(nullptr)}};
  j["loss"] = {{"metric", loss.metric.name()},
               {"tau", loss.tau},
               {"double_augmentation", loss.double_augmentation},
               {"augmentation", augmentation_json(loss.augmentation, loss.background_dir)},
               {"abc_weight", loss.weights.abc_weight},
               {"supervised_weight", loss.weights.supervised_weight},
               {"regression_factors", loss.regression_factors}};
  j["encoder"] = encoder.to_json();
  j["training"] = {{"steps", training.steps},
                   {"lr", training.lr.base},
                   {"lr_decay_factor", training.lr.factor},
                   {"lr_decay_interval", training.lr.interval},
                   {"pairs_per_step", training.pairs_per_step},
                   {"seed", training.seed},
                   {"dtype", training.dtype},
                   {"checkpoint_every", training.checkpoint_every}};
  j["probe"] = {{"seed", probe.seed},
                {"samples", probe.samples},
                {"sigma", probe.sigma ? json(*probe.sigma) : json("characteristic")},
                {"factors", probe.factors},
                {"dump_limit", probe.dump_limit},
                {"style", probe.style},
                {"classifier",
                 {{"enabled", probe.classifier},
                  {"batch", probe.classifier_budget.batch},
                  {"steps", probe.classifier_budget.steps},
                  {"lr", probe.classifier_budget.lr},
                  {"test_fraction", probe.classifier_budget.test_fraction}}},
                {"mine",
                 {{"enabled", probe.mine.enabled},
                  {"batch", probe.mine.budget.batch},
                  {"steps", probe.mine.budget.steps},
                  {"lr", probe.mine.budget.lr},
                  {"eval_samples", probe.mine.budget.eval_samples},
                  {"sweep_points", probe.mine.sweep_points},
                  {"sweep_lo", probe.mine.sweep_lo},
                  {"sweep_hi", probe.mine.sweep_hi}}},
                {"codebook",
                 {{"enabled", probe.codebook.enabled},
                  {"rotation_factor", probe.codebook.rotation_factor},
                  {"pool", probe.codebook.pool},
                  {"queries", probe.codebook.queries},
                  {"size", probe.codebook.size},
                  {"count", probe.codebook.count},
                  {"thresholds", probe.codebook.thresholds}}}};
  j["plots"] = plots;
  j["output_dir"] = output_dir;
  return j;
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

void ExperimentConfig::validate() const {
  static const std::regex kName("[A-Za-z0-9_.-]+");
  if (!std::regex_match(name, kName)) throw SchemaError("name: use letters, digits, '_', '.', '-'");
  validate_dataset(dataset, "dataset");
  const FactorSpec spec = block_spec(dataset);
  const bool known_spec = dataset.kind != "shapes3d";
  auto require_factor = [&](const std::string& f, const std::string& where) {
    if (known_spec && !spec.find(f)) throw SchemaError(where + ": unknown factor '" + f + "'");
  };

  if (curation.set_size < 1) throw SchemaError("curation.set_size: must be >= 1");
  for (const auto& f : curation.inactive) require_factor(f, "curation.inactive");
  try {
    curation.titration.validate();
  } catch (const Error& e) {
    throw SchemaError(std::string("curation.titration: ") + e.what());
  }
  if (!curation.unconstrained_b && (curation.extraneous || curation.titration.final_fraction > 0)) {
    throw SchemaError("curation: extraneous data needs unconstrained_b");
  }
  if (curation.titration.final_fraction > 0 && !curation.extraneous) {
    throw SchemaError("curation.extraneous: required when titration adds extraneous elements");
  }
  if (curation.extraneous) {
    validate_dataset(*curation.extraneous, "curation.extraneous");
    if (!(block_shape(*curation.extraneous) == block_shape(dataset))) {
      throw SchemaError("curation.extraneous: image shape differs from the dataset");
    }
  }
  if (loss.augmentation.background_paint && loss.background_dir.empty()) {
    throw SchemaError("loss.augmentation.background_dir: required for background_paint");
  }
  for (const auto& f : loss.regression_factors) require_factor(f, "loss.regression_factors");
  if (training.dtype != "float32" && training.dtype != "float64") {
    throw SchemaError("training.dtype: expected float32 or float64");
  }
  try {
    train_config().validate();
  } catch (const SchemaError&) {
    throw;
  } catch (const Error& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  if (!(encoder.input == block_shape(dataset))) throw SchemaError("encoder: input shape does not match the dataset");

  if (probe.samples < 2) throw SchemaError("probe.samples: must be >= 2");
  if (probe.sigma && !(*probe.sigma >= 0 && std::isfinite(*probe.sigma))) {
    throw SchemaError("probe.sigma: must be a finite non-negative number");
  }
  for (const auto& f : probe.factors) require_factor(f, "probe.factors");
  if (probe.classifier && !(probe.classifier_budget.test_fraction > 0 && probe.classifier_budget.test_fraction < 1 &&
                            probe.classifier_budget.steps >= 0 && probe.classifier_budget.batch >= 1)) {
    throw SchemaError("probe.classifier: invalid budget");
  }
  if (probe.mine.enabled || probe.mine.sweep_points > 0) {
    const MineBudget& b = probe.mine.budget;
    if (b.batch < 2 || b.steps < 1 || !(b.lr > 0) || b.eval_samples < 1) throw SchemaError("probe.mine: invalid budget");
  }
  if (probe.mine.sweep_points == 1 || probe.mine.sweep_points < 0) {
    throw SchemaError("probe.mine.sweep_points: 0 or >= 2");
  }
  if (probe.mine.sweep_points > 0 && !(probe.mine.sweep_lo > 0 && probe.mine.sweep_hi > probe.mine.sweep_lo)) {
    throw SchemaError("probe.mine: need 0 < sweep_lo < sweep_hi");
  }
  if (probe.codebook.enabled) {
    const CodebookBlock& cb = probe.codebook;
    require_factor(cb.rotation_factor, "probe.codebook.rotation_factor");
    if (cb.size < 1 || cb.count < 1 || cb.queries < 1) throw SchemaError("probe.codebook: sizes must be positive");
    if (cb.pool < cb.size) throw SchemaError("probe.codebook: pool smaller than the codebook");
    if (probe.samples < cb.pool + cb.queries) throw SchemaError("probe.samples: fewer than codebook pool + queries");
    if (cb.thresholds.empty() || !std::is_sorted(cb.thresholds.begin(), cb.thresholds.end()) ||
        cb.thresholds.front() <= 0) {
      throw SchemaError("probe.codebook.thresholds: need ascending positive values");
    }
  }
  if (probe.style && !(dataset.kind == "mnist" && dataset.withheld_label)) {
    throw SchemaError("probe.style: needs an mnist dataset with a withheld label");
  }
  for (const auto& p : plots) {
    if (!kPlotKinds.count(p)) throw SchemaError("plots: unknown plot kind '" + p + "'");
  }
  if (std::count(plots.begin(), plots.end(), "mi_sigma") && probe.mine.sweep_points < 2) {
    throw SchemaError("plots: mi_sigma needs probe.mine.sweep_points >= 2");
  }
  if (std::count(plots.begin(), plots.end(), "retrieval") && curation.inactive.empty()) {
    throw SchemaError("plots: retrieval groups the gallery by the first inactive factor; none given");
  }
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.encoder = encoder;
  t.metric = loss.metric;
  t.tau = loss.tau;
  t.double_augmentation = loss.double_augmentation;
  t.augmentation = loss.augmentation;
  t.weights = loss.weights;
  t.regression_factors = loss.regression_factors;
  t.steps = training.steps;
  t.lr = training.lr;
  t.pairs_per_step = training.pairs_per_step;
  t.seed = training.seed;
  t.dtype = training.dtype == "float64" ? torch::kFloat64 : torch::kFloat32;
  t.checkpoint_every = training.checkpoint_every;
  return t;
}

double ExperimentConfig::probe_sigma() const {
  return probe.sigma ? *probe.sigma : characteristic_scale(loss.metric, Temperature(loss.tau));
}

fs::path ExperimentConfig::run_directory() const { return fs::path(output_dir) / (name + "-" + hash()); }

// ---- data ----

namespace {

std::shared_ptr<const Dataset> open_block(const DatasetBlock& b, std::vector<Observation>* withheld) {
  if (b.kind == "procedural") {
    return std::make_shared<GridDataset>(std::make_shared<ProceduralRenderer>(), b.render_seed, b.resolution);
  }
  if (b.kind == "glyph") {
    return std::make_shared<GridDataset>(std::make_shared<GlyphRenderer>(b.canvas), b.render_seed, b.resolution);
  }
  const fs::path p = resolve_data_path(b.path);
  if (b.kind == "mnist") {
    const fs::path images = p / "train-images-idx3-ubyte", labels = p / "train-labels-idx1-ubyte";
    for (const auto& f : {images, labels}) {
      if (!fs::exists(f)) throw MissingArtifactError("dataset file not found: '" + f.string() + "'");
    }
    IdxIngest ingest = ingest_idx_images(images.string(), labels.string(), b.withheld_label);
    if (withheld) *withheld = std::move(ingest.withheld);
    return ingest.dataset;
  }
  if (!fs::exists(p)) throw MissingArtifactError("dataset file not found: '" + p.string() + "'");
  return open_shapes3d_archive(p.string());
}

}  // namespace

ExperimentData open_experiment_data(const ExperimentConfig& config) {
  ExperimentData data;
  data.full = open_block(config.dataset, &data.withheld);
  data.train = data.full;
  if (!config.dataset.held_out.empty()) {
    data.train = SubsetDataset::excluding(data.full, config.dataset.held_out_factor, config.dataset.held_out);
  }
  if (config.curation.extraneous) data.extraneous = open_block(*config.curation.extraneous, nullptr);
  if (!config.loss.background_dir.empty()) {
    const fs::path dir = resolve_data_path(config.loss.background_dir);
    if (!fs::is_directory(dir)) throw MissingArtifactError("background directory not found: '" + dir.string() + "'");
    data.backgrounds = std::make_shared<BackgroundPool>(BackgroundPool::load_directory(dir.string()));
  }
  // Factor names of archives are only known once opened.
  const FactorSpec& spec = data.full->spec();
  for (const auto& f : config.curation.inactive) spec.index_of(f);
  for (const auto& f : config.probe.factors) spec.index_of(f);
  return data;
}

PairSource make_pair_source(const ExperimentConfig& config, const ExperimentData& data) {
  PairSource src;
  src.spec = data.train->spec();
  auto train = data.train;
  auto extra = data.extraneous;
  const auto inactive = config.curation.inactive;
  const std::size_t size = config.curation.set_size;
  const TitrationSchedule titration = config.curation.titration;
  const bool unconstrained = config.curation.unconstrained_b;
  src.next = [=](std::int64_t step, Rng& rng) {
    if (unconstrained) return sample_pair_x(*train, extra.get(), inactive, size, titration, step, rng);
    return sample_pair(*train, inactive, size, rng);
  };
  return src;
}

ProbeSample draw_probe_sample(const ExperimentConfig& config, const ExperimentData& data) {
  Rng rng(config.probe.seed);
  ProbeSample out;
  const std::size_t n = config.probe.samples;
  if (const auto* grid = dynamic_cast<const GridDataset*>(data.full.get())) {
    // Fresh latent draws: continuous factors off the training grid.
    const FactorSpec& spec = grid->spec();
    const auto& held = config.dataset.held_out;
    for (std::size_t i = 0; i < n; ++i) {
      ValueAssignment fixed;
      if (!held.empty()) {
        fixed[config.dataset.held_out_factor] = held[std::uniform_int_distribution<std::size_t>(0, held.size() - 1)(rng)];
      }
      LatentCode code = sample_latent(spec, rng, fixed);
      out.observations.push_back(grid->renderer().render(code, grid->seed()));
      out.latents.push_back(std::move(code));
    }
    return out;
  }
  std::vector<std::size_t> idx(data.full->size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min(n, idx.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(idx[i], idx[std::uniform_int_distribution<std::size_t>(i, idx.size() - 1)(rng)]);
  }
  for (std::size_t i = 0; i < take; ++i) {
    out.observations.push_back(data.full->observation(idx[i]));
    out.latents.push_back(data.full->latent(idx[i]));
  }
  return out;
}

// ---- probes ----

json run_probes(const ExperimentConfig& config, const ExperimentData& data, Encoder& encoder, const fs::path& run_dir) {
  const std::string hash = config.hash();
  const ProbeBlock& pb = config.probe;
  const FactorSpec& spec = data.full->spec();
  const double sigma = config.probe_sigma();
  const int bins = data.full->key_bins();

  std::vector<std::size_t> factors;
  if (pb.factors.empty()) {
    for (std::size_t f = 0; f < spec.size(); ++f) factors.push_back(f);
  } else {
    for (const auto& name : pb.factors) factors.push_back(spec.index_of(name));
  }
  auto is_inactive = [&](const std::string& name) {
    return std::find(config.curation.inactive.begin(), config.curation.inactive.end(), name) !=
           config.curation.inactive.end();
  };

  const ProbeSample sample = draw_probe_sample(config, data);
  const torch::Tensor emb = embed_all(encoder, sample.observations).to(torch::kFloat64);
  const auto n = static_cast<std::size_t>(emb.size(0));
  const auto e_dim = emb.size(1);

  json report = {{"config_hash", hash}, {"name", config.name}, {"sigma", sigma}, {"samples", n}};
  report["embedding_std"] = emb.std().item<double>();

  {
    std::ostringstream csv;
    csv << "config_hash,index";
    for (std::int64_t e = 0; e < e_dim; ++e) csv << ",e" << e;
    for (std::size_t f = 0; f < spec.size(); ++f) csv << ',' << spec[f].name;
    csv << '\n';
    const auto acc = emb.accessor<double, 2>();
    for (std::size_t i = 0; i < std::min(n, pb.dump_limit); ++i) {
      csv << hash << ',' << i;
      for (std::int64_t e = 0; e < e_dim; ++e) csv << ',' << fmt(acc[static_cast<std::int64_t>(i)][e]);
      for (std::size_t f = 0; f < spec.size(); ++f) csv << ',' << fmt(sample.latents[i].values[f]);
      csv << '\n';
    }
    write_text(run_dir / "embeddings.csv", csv.str());
  }

  auto factor_values = [&](std::size_t f) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = sample.latents[i].values[f];
    return torch::tensor(v, torch::kFloat64);
  };

  if (pb.classifier) {
    json cls = json::object();
    for (std::size_t f : factors) {
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = spec[f].key(sample.latents[i].values[f], bins);
      if (std::set<int>(labels.begin(), labels.end()).size() < 2) continue;  // constant in the sample
      const ProbeResult r = classifier_probe(emb, labels, NoiseSpec{sigma}, pb.classifier_budget, pb.seed + 1000 + f);
      cls[spec[f].name] = {{"accuracy", r.accuracy}, {"chance", r.chance}, {"classes", r.classes},
                           {"inactive", is_inactive(spec[f].name)}};
    }
    report["classifier"] = cls;
  }

  if (pb.mine.enabled) {
    json mi = json::object();
    for (std::size_t f : factors) {
      const MiEstimate m = estimate_mi(emb, factor_values(f), NoiseSpec{sigma}, pb.mine.budget, pb.seed + 2000 + f);
      mi[spec[f].name] = {{"nats", m.nats}, {"raw", m.raw}, {"inactive", is_inactive(spec[f].name)}};
    }
    report["mine"] = mi;
  }

  if (pb.mine.sweep_points >= 2) {
    std::ostringstream csv;
    csv << "config_hash,factor,inactive,sigma,nats,raw\n";
    const std::vector<double> sigmas = log_space(pb.mine.sweep_lo, pb.mine.sweep_hi, pb.mine.sweep_points);
    for (std::size_t f : factors) {
      const torch::Tensor g = factor_values(f);
      for (std::size_t s = 0; s < sigmas.size(); ++s) {
        const MiEstimate m = estimate_mi(emb, g, NoiseSpec{sigmas[s]}, pb.mine.budget, pb.seed + 3000 + 100 * f + s);
        csv << hash << ',' << spec[f].name << ',' << (is_inactive(spec[f].name) ? 1 : 0) << ',' << fmt(sigmas[s])
            << ',' << fmt(m.nats) << ',' << fmt(m.raw) << '\n';
      }
    }
    write_text(run_dir / "mi_sweep.csv", csv.str());
  }

  if (pb.codebook.enabled) {
    const CodebookBlock& cb = pb.codebook;
    const std::size_t rf = spec.index_of(cb.rotation_factor);
    Codebook pool;
    pool.metric = config.loss.metric;
    pool.embeddings = emb.slice(0, 0, static_cast<std::int64_t>(cb.pool));
    for (std::size_t i = 0; i < cb.pool; ++i) pool.rotations.push_back(quaternion_about_z(sample.latents[i].values[rf]));
    std::vector<Quaternion> truth;
    for (std::size_t i = cb.pool; i < cb.pool + cb.queries; ++i) {
      truth.push_back(quaternion_about_z(sample.latents[i].values[rf]));
    }
    const torch::Tensor queries =
        emb.slice(0, static_cast<std::int64_t>(cb.pool), static_cast<std::int64_t>(cb.pool + cb.queries));
    const CodebookProtocolResult r =
        random_codebook_protocol(queries, truth, pool, cb.size, cb.count, cb.thresholds, pb.seed + 4000);
    json book = {{"median", r.mean.median}, {"size", cb.size}, {"codebooks", cb.count}};
    std::ostringstream csv;
    csv << "config_hash,method,median";
    for (double t : cb.thresholds) csv << ",acc@" << fmt(t);
    csv << '\n' << hash << ',' << csv_field(config.name) << ',' << fmt(r.mean.median);
    for (std::size_t k = 0; k < cb.thresholds.size(); ++k) {
      book["acc@" + fmt(cb.thresholds[k])] = r.mean.accuracy[k];
      csv << ',' << fmt(r.mean.accuracy[k]);
    }
    csv << '\n';
    json per = json::array();
    for (const auto& s : r.per_codebook) per.push_back({{"median", s.median}, {"accuracy", s.accuracy}});
    book["per_codebook"] = per;
    report["codebook"] = book;
    write_text(run_dir / "codebook.csv", csv.str());
  }

  if (pb.style) {
    if (data.withheld.size() < 2) throw ProbeError("style probe needs withheld observations");
    const torch::Tensor w = embed_all(encoder, data.withheld).to(torch::kFloat64);
    const Pca pca = fit_pca(w);
    const torch::Tensor pc1 = pca.project(w, 1).reshape({-1}).contiguous();
    std::vector<double> score(pc1.data_ptr<double>(), pc1.data_ptr<double>() + pc1.numel());
    std::vector<double> ink;
    for (const auto& o : data.withheld) {
      ink.push_back(std::accumulate(o.image.pixels.begin(), o.image.pixels.end(), 0.0) /
                    static_cast<double>(o.image.size()));
    }
    const double rho = spearman(score, ink);
    report["style"] = {{"pc1_ink_spearman", rho},
                       {"abs_pc1_ink_spearman", std::abs(rho)},
                       {"samples", data.withheld.size()},
                       {"pc1_fraction", pca.fractions[0]}};
  }

  write_text(run_dir / "report.json", report.dump(2) + "\n");
  return report;
}

std::map<std::string, double> flatten_report(const json& report) {
  std::map<std::string, double> out;
  std::function<void(const json&, const std::string&)> walk = [&](const json& j, const std::string& prefix) {
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) walk(v, prefix.empty() ? k : prefix + "." + k);
    } else if (j.is_number()) {
      out[prefix] = j.get<double>();
    }
  };
  walk(report, "");
  return out;
}

// ---- runs ----

RunResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::string hash = config.hash();
  RunResult result;
  result.directory = config.run_directory();
  fs::create_directories(result.directory);
  const fs::path dir = result.directory;
  fs::remove(dir / "FAILED");
  try {
    json cfg = config.to_json();
    cfg["config_hash"] = hash;
    write_text(dir / "config.json", cfg.dump(2) + "\n");

    const ExperimentData data = open_experiment_data(config);
    TrainConfig tc = config.train_config();
    tc.augmentation.background_pool = data.backgrounds;
    const PairSource source = make_pair_source(config, data);

    std::ofstream timing(dir / "timing.jsonl", std::ios::trunc);
    const auto t0 = std::chrono::steady_clock::now();
    TrainOutputs outputs{(dir / "checkpoint.pt").string(), (dir / "metrics.jsonl").string(), hash};
    TrainState state = train(tc, source, outputs, std::nullopt, [&](const StepRecord& r) {
      timing << json{{"step", r.step}, {"wall_seconds", seconds_since(t0)}, {"config_hash", hash}}.dump() << '\n';
    });
    result.train_seconds = seconds_since(t0);
    timing << json{{"phase", "train"}, {"seconds", result.train_seconds}, {"config_hash", hash}}.dump() << '\n';

    const auto t1 = std::chrono::steady_clock::now();
    result.report = run_probes(config, data, state.encoder, dir);
    result.probe_seconds = seconds_since(t1);
    timing << json{{"phase", "probe"}, {"seconds", result.probe_seconds}, {"config_hash", hash}}.dump() << '\n';

    if (!config.plots.empty()) emit_plots(dir, config.plots);
  } catch (const std::exception& e) {
    write_text(dir / "FAILED",
               json{{"config_hash", hash}, {"error", error_kind(e)}, {"message", e.what()}}.dump(2) + "\n");
    throw;
  }
  return result;
}

RunResult probe_run(const fs::path& run_dir) {
  const ExperimentConfig config = ExperimentConfig::load(run_dir / "config.json");
  const fs::path ckpt = run_dir / "checkpoint.pt";
  if (!fs::exists(ckpt)) throw MissingArtifactError("run directory lacks checkpoint.pt: '" + run_dir.string() + "'");
  const ExperimentData data = open_experiment_data(config);
  TrainState state = TrainState::load(ckpt.string(), config.train_config());
  RunResult r;
  r.directory = run_dir;
  const auto t0 = std::chrono::steady_clock::now();
  r.report = run_probes(config, data, state.encoder, run_dir);
  r.probe_seconds = seconds_since(t0);
  return r;
}

// ---- sweeps ----

ExperimentConfig with_override(const ExperimentConfig& config, const std::string& axis, const json& value) {
  json j = config.to_json();
  json::json_pointer ptr;
  try {
    ptr = axis_pointer(axis);
  } catch (const json::exception& e) {
    throw SchemaError("sweep axis '" + axis + "': " + e.what());
  }
  if (!j.contains(ptr)) throw SchemaError("sweep axis '" + axis + "' not found in config");
  j[ptr] = value;
  return ExperimentConfig::from_json(j);
}

SweepResult sweep(const ExperimentConfig& config, const std::string& axis, const std::vector<json>& values,
                  const std::vector<std::uint64_t>& seeds) {
  if (values.empty()) throw SchemaError("sweep needs at least one value");
  std::vector<std::uint64_t> seed_list = seeds;
  if (seed_list.empty()) seed_list.push_back(config.training.seed);

  // Every cell is validated before any training starts.
  std::vector<ExperimentConfig> cells;
  for (const auto& v : values) {
    for (std::uint64_t s : seed_list) {
      ExperimentConfig c = with_override(config, axis, v);
      c.training.seed = s;
      c.validate();
      cells.push_back(std::move(c));
    }
  }

  SweepResult result;
  for (const auto& c : cells) result.runs.push_back(run_experiment(c));

  std::ostringstream csv;
  csv << "config_hash,axis,value,metric,mean,standard_error,runs\n";
  const std::string hash = config.hash();
  for (std::size_t v = 0; v < values.size(); ++v) {
    std::map<std::string, std::vector<double>> per_metric;
    for (std::size_t s = 0; s < seed_list.size(); ++s) {
      for (const auto& [k, x] : flatten_report(result.runs[v * seed_list.size() + s].report)) per_metric[k].push_back(x);
    }
    for (const auto& [metric, xs] : per_metric) {
      if (xs.size() != seed_list.size()) continue;  // present in some runs only
      SweepCell cell;
      cell.value = values[v];
      cell.metric = metric;
      cell.runs = static_cast<int>(xs.size());
      cell.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
      if (xs.size() > 1) {
        double ss = 0;
        for (double x : xs) ss += (x - cell.mean) * (x - cell.mean);
        cell.standard_error = std::sqrt(ss / static_cast<double>(xs.size() - 1)) / std::sqrt(static_cast<double>(xs.size()));
      }
      csv << hash << ',' << csv_field(axis) << ',' << csv_field(cell.value.dump()) << ',' << csv_field(metric) << ','
          << fmt(cell.mean) << ',' << fmt(cell.standard_error) << ',' << cell.runs << '\n';
      result.cells.push_back(std::move(cell));
    }
  }
  std::string axis_tag = axis;
  for (char& ch : axis_tag) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_') ch = '-';
  }
  fs::create_directories(config.output_dir);
  result.table = fs::path(config.output_dir) / ("sweep-" + axis_tag + "-" + hash + ".csv");
  write_text(result.table, csv.str());
  return result;
}

}  // namespace abc
