#include "abc/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "abc/errors.hpp"

namespace abc {
namespace {

using nlohmann::json;

constexpr const char* kCheckpointFormat = "abc-checkpoint-1";

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

json augmentation_json(const TransformSpec& t) {
  return {{"translate", t.translate},     {"crop_translate_amplitude", t.crop_translate_amplitude},
          {"brightness", t.brightness},   {"brightness_delta", range_json(t.brightness_delta)},
          {"hue", t.hue},                 {"hue_delta", range_json(t.hue_delta)},
          {"noise", t.noise},             {"pixel_noise_std", t.pixel_noise_std},
          {"edge_mix", t.edge_mix},       {"edge_mix_weight", range_json(t.edge_mix_weight)},
          {"background_paint", t.background_paint}};
}

std::vector<Observation> transformed(const std::vector<Observation>& set, const std::vector<TransformSample>& samples) {
  std::vector<Observation> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) out.push_back(apply(samples[i], set[i]));
  return out;
}

// Two augmented views of every element; both views are drawn up front so the
// rng consumption does not depend on image content.
std::pair<std::vector<Observation>, std::vector<Observation>> two_views(const std::vector<Observation>& set,
                                                                        const TransformSpec& spec, Rng& rng) {
  std::vector<TransformSample> first, second;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto [a, b] = sample_transform_pair(spec, rng);
    first.push_back(std::move(a));
    second.push_back(std::move(b));
  }
  return {transformed(set, first), transformed(set, second)};
}

std::vector<Observation> one_view(const std::vector<Observation>& set, const TransformSpec& spec, Rng& rng) {
  if (!spec.any_enabled()) return set;
  std::vector<TransformSample> samples;
  for (std::size_t i = 0; i < set.size(); ++i) samples.push_back(sample_transform(spec, rng));
  return transformed(set, samples);
}

torch::Tensor angle_labels(const std::vector<Observation>& set, const std::vector<std::size_t>& factors,
                           torch::Dtype dtype) {
  torch::Tensor out = torch::empty({static_cast<std::int64_t>(set.size()), static_cast<std::int64_t>(factors.size())},
                                   torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (!set[i].source_latent) throw ContractError("regression needs source latents on every element");
    for (std::size_t k = 0; k < factors.size(); ++k) {
      acc[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(k)] = set[i].source_latent->values.at(factors[k]);
    }
  }
  return out.to(dtype);
}

std::vector<torch::Tensor> all_parameters(TrainState& s) {
  std::vector<torch::Tensor> params = s.encoder->trainable_parameters();
  if (s.head) {
    for (const auto& p : s.head->parameters()) params.push_back(p);
  }
  return params;
}

}  // namespace

void LossWeights::validate() const {
  if (!(abc_weight >= 0) || !(supervised_weight >= 0)) throw ConfigError("loss weights must be non-negative");
  if (abc_weight == 0 && supervised_weight == 0) throw ConfigError("loss weights are both zero");
}

double combined_loss(double abc_value, double supervised_value, const LossWeights& weights) {
  return weights.abc_weight * abc_value + weights.supervised_weight * supervised_value;
}

torch::Tensor combined_loss(const torch::Tensor& abc_value, const torch::Tensor& supervised_value,
                            const LossWeights& weights) {
  return weights.abc_weight * abc_value + weights.supervised_weight * supervised_value;
}

double StaircaseSchedule::at(std::int64_t step) const {
  if (interval <= 0) return base;
  return base * std::pow(factor, static_cast<double>(step / interval));
}

SphericalOutput spherical_head(const torch::Tensor& logits, int angles) {
  if (logits.dim() != 2 || logits.size(1) != angles * 6) {
    throw ContractError("spherical head expects (N, " + std::to_string(angles * 6) + ") logits");
  }
  const torch::Tensor blocks = logits.view({logits.size(0), angles, 6});
  return {torch::sqrt(torch::softmax(blocks.narrow(2, 0, 2), 2)), blocks.narrow(2, 2, 4)};
}

torch::Tensor spherical_magnitude_targets(const torch::Tensor& angles) {
  return torch::stack({torch::abs(torch::sin(angles)), torch::abs(torch::cos(angles))}, 2);
}

torch::Tensor spherical_quadrant_targets(const torch::Tensor& angles) {
  const torch::Tensor neg_sin = (torch::sin(angles) < 0).to(torch::kLong);
  const torch::Tensor neg_cos = (torch::cos(angles) < 0).to(torch::kLong);
  return 2 * neg_sin + neg_cos;
}

torch::Tensor spherical_loss(const SphericalOutput& out, const torch::Tensor& angles) {
  const torch::Tensor target = spherical_magnitude_targets(angles);
  const torch::Tensor cosine = (out.magnitudes * target).sum(2);
  const torch::Tensor quadrant = torch::nn::functional::cross_entropy(
      out.quadrants.reshape({-1, 4}), spherical_quadrant_targets(angles).reshape({-1}));
  return (1 - cosine).mean() + quadrant;
}

torch::Tensor spherical_decode(const SphericalOutput& out) {
  const torch::Tensor q = out.quadrants.argmax(2);
  const torch::Tensor sin_sign = 1 - 2 * torch::floor_divide(q, 2).to(out.magnitudes.dtype());
  const torch::Tensor cos_sign = 1 - 2 * torch::remainder(q, 2).to(out.magnitudes.dtype());
  return torch::atan2(sin_sign * out.magnitudes.select(2, 0), cos_sign * out.magnitudes.select(2, 1));
}

void TrainConfig::validate() const {
  encoder.validate();
  augmentation.validate();
  weights.validate();
  Temperature{tau};
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(lr.base > 0)) throw ConfigError("learning rate must be positive");
  if (!(lr.factor > 0)) throw ConfigError("learning-rate decay factor must be positive");
  if (pairs_per_step < 1) throw ConfigError("pairs_per_step must be >= 1");
  if (dtype != torch::kFloat32 && dtype != torch::kFloat64) throw ConfigError("dtype must be float32 or float64");
  if (weights.supervised_weight > 0 && regression_factors.empty()) {
    throw ConfigError("supervised weight set without regression factors");
  }
}

std::string train_config_hash(const TrainConfig& c) {
  const json j = {{"encoder", c.encoder.to_json()},
                  {"metric", c.metric.name()},
                  {"tau", c.tau},
                  {"double_augmentation", c.double_augmentation},
                  {"augmentation", augmentation_json(c.augmentation)},
                  {"weights", {c.weights.abc_weight, c.weights.supervised_weight}},
                  {"regression_factors", c.regression_factors},
                  {"lr", {c.lr.base, c.lr.factor, c.lr.interval}},
                  {"pairs_per_step", c.pairs_per_step},
                  {"seed", c.seed},
                  {"dtype", c.dtype == torch::kFloat64 ? "float64" : "float32"}};
  return fnv1a_hex(j.dump());
}

TrainState::TrainState(const TrainConfig& config)
    : encoder(config.encoder, config.seed, config.dtype), seed(config.seed), rng(config.seed ^ 0x9e3779b97f4a7c15ULL),
      config_hash_(train_config_hash(config)) {
  if (!config.regression_factors.empty()) {
    head = torch::nn::Linear(config.encoder.embedding_dim, static_cast<std::int64_t>(config.regression_factors.size()) * 6);
    fan_in_uniform_init(*head, config.seed + 1);
    head->to(config.dtype);
  }
  optimizer = std::make_unique<torch::optim::Adam>(
      all_parameters(*this), torch::optim::AdamOptions(config.lr.base).betas({0.9, 0.999}));
}

void TrainState::save(const std::string& path) const {
  torch::serialize::OutputArchive archive;
  torch::serialize::OutputArchive enc, opt;
  encoder->save(enc);
  archive.write("encoder", enc);
  if (head) {
    torch::serialize::OutputArchive h;
    head->save(h);
    archive.write("head", h);
  }
  optimizer->save(opt);
  archive.write("optimizer", opt);

  std::ostringstream rng_state;
  rng_state << rng;
  const json header = {{"format", kCheckpointFormat},
                       {"config_hash", config_hash_},
                       {"step", step},
                       {"seed", seed},
                       {"rng", rng_state.str()}};

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
    out << header.dump() << '\n';
    archive.save_to(out);
    if (!out) throw ConfigError("failed writing checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

TrainState TrainState::load(const std::string& path, const TrainConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint '" + path + "' not found");
  std::string line;
  std::getline(in, line);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception&) {
    throw ParseError("checkpoint header is not JSON", 0);
  }
  if (header.value("format", "") != kCheckpointFormat) throw ParseError("unknown checkpoint format", 0);
  TrainState state(config);
  if (header.at("config_hash").get<std::string>() != state.config_hash_) {
    throw ConfigError("checkpoint '" + path + "' was written by config " + header.at("config_hash").get<std::string>() +
                      ", not " + state.config_hash_);
  }
  state.step = header.at("step").get<std::int64_t>();
  state.seed = header.at("seed").get<std::uint64_t>();
  std::istringstream rng_state(header.at("rng").get<std::string>());
  rng_state >> state.rng;

  std::stringstream payload;
  payload << in.rdbuf();
  torch::serialize::InputArchive archive;
  archive.load_from(payload);
  torch::serialize::InputArchive enc, opt;
  archive.read("encoder", enc);
  state.encoder->load(enc);
  if (state.head) {
    torch::serialize::InputArchive h;
    archive.read("head", h);
    state.head->load(h);
  }
  archive.read("optimizer", opt);
  state.optimizer->load(opt);
  return state;
}

StepRecord train_step(TrainState& state, const TrainConfig& config, const PairSource& source) {
  StepRecord rec;
  rec.step = state.step;
  rec.lr = config.lr.at(state.step);
  for (auto& group : state.optimizer->param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(rec.lr);
  }

  std::vector<std::size_t> regression;
  if (!config.regression_factors.empty()) {
    if (!source.spec) throw ContractError("regression factors need a factor spec on the pair source");
    for (const auto& name : config.regression_factors) regression.push_back(source.spec->index_of(name));
  }

  const SimilarityMetric metric = config.metric;
  const Temperature tau{config.tau};
  const InputShape& shape = config.encoder.input;
  torch::Tensor abc_total = torch::zeros({}, config.dtype);
  torch::Tensor sup_total = torch::zeros({}, config.dtype);
  double extraneous = 0;

  for (int p = 0; p < config.pairs_per_step; ++p) {
    const SetBatch batch = source.next(state.step, state.rng);
    const auto na = static_cast<std::int64_t>(batch.set_a.size());
    const auto nb = static_cast<std::int64_t>(batch.set_b.size());
    extraneous += static_cast<double>(batch.extraneous_count) / static_cast<double>(nb);

    std::vector<Observation> stacked;
    std::vector<Observation> a1, b1;
    if (config.double_augmentation) {
      auto [a_first, a_second] = two_views(batch.set_a, config.augmentation, state.rng);
      auto [b_first, b_second] = two_views(batch.set_b, config.augmentation, state.rng);
      a1 = a_first, b1 = b_first;
      for (auto* v : {&a_first, &a_second, &b_first, &b_second}) stacked.insert(stacked.end(), v->begin(), v->end());
    } else {
      a1 = one_view(batch.set_a, config.augmentation, state.rng);
      b1 = one_view(batch.set_b, config.augmentation, state.rng);
      stacked = a1;
      stacked.insert(stacked.end(), b1.begin(), b1.end());
    }

    const torch::Tensor emb = state.encoder->forward(to_batch(stacked, shape, config.dtype));
    torch::Tensor ua1, ub1, abc_value;
    if (config.double_augmentation) {
      ua1 = emb.narrow(0, 0, na);
      const torch::Tensor ua2 = emb.narrow(0, na, na);
      ub1 = emb.narrow(0, 2 * na, nb);
      const torch::Tensor ub2 = emb.narrow(0, 2 * na + nb, nb);
      abc_value = abc_loss_double_aug(ua1, ua2, ub1, ub2, metric, tau);
    } else {
      ua1 = emb.narrow(0, 0, na);
      ub1 = emb.narrow(0, na, nb);
      abc_value = abc_loss(ua1, ub1, metric, tau);
    }
    abc_total = abc_total + abc_value;

    if (state.head) {
      const torch::Tensor rows = torch::cat({ua1, ub1}, 0);
      const torch::Tensor normalized = rows / rows.norm(2, 1, true).clamp_min(1e-12);
      std::vector<Observation> labelled = a1;
      labelled.insert(labelled.end(), b1.begin(), b1.end());
      const SphericalOutput out = spherical_head(state.head->forward(normalized),
                                                 static_cast<int>(regression.size()));
      sup_total = sup_total + spherical_loss(out, angle_labels(labelled, regression, config.dtype));
    }
  }

  const double pairs = config.pairs_per_step;
  abc_total = abc_total / pairs;
  sup_total = sup_total / pairs;
  const torch::Tensor loss = combined_loss(abc_total, sup_total, config.weights);
  rec.abc_loss = abc_total.item<double>();
  rec.supervised_loss = sup_total.item<double>();
  rec.loss = loss.item<double>();
  rec.extraneous_fraction = extraneous / pairs;
  if (!std::isfinite(rec.loss)) throw NumericalError("non-finite training loss at step " + std::to_string(state.step));

  state.optimizer->zero_grad();
  loss.backward();
  state.optimizer->step();
  ++state.step;
  return rec;
}

TrainState train(const TrainConfig& config, const PairSource& source, const TrainOutputs& outputs,
                 std::optional<TrainState> resume, const std::function<void(const StepRecord&)>& on_step) {
  config.validate();
  torch::set_num_threads(1);
  TrainState state = resume ? std::move(*resume) : TrainState(config);
  if (state.config_hash() != train_config_hash(config)) throw ConfigError("resume state belongs to another config");

  std::ofstream metrics;
  if (!outputs.metrics_path.empty()) {
    metrics.open(outputs.metrics_path, state.step > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw ConfigError("cannot open metrics file '" + outputs.metrics_path + "'");
  }
  const std::string hash = outputs.config_hash.empty() ? state.config_hash() : outputs.config_hash;
  while (state.step < config.steps) {
    StepRecord rec;
    try {
      rec = train_step(state, config, source);
    } catch (const NumericalError&) {
      if (!outputs.checkpoint_path.empty()) state.save(outputs.checkpoint_path);
      throw;
    }
    if (metrics.is_open()) {
      json line = {{"step", rec.step},   {"loss", rec.loss}, {"abc_loss", rec.abc_loss}, {"lr", rec.lr},
                   {"extraneous_fraction", rec.extraneous_fraction}, {"config_hash", hash}};
      if (state.head) line["supervised_loss"] = rec.supervised_loss;
      metrics << line.dump() << '\n';
      metrics.flush();
    }
    if (on_step) on_step(rec);
    if (!outputs.checkpoint_path.empty() && config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
      state.save(outputs.checkpoint_path);
    }
  }
  if (!outputs.checkpoint_path.empty()) state.save(outputs.checkpoint_path);
  return state;
}

}  // namespace abc
