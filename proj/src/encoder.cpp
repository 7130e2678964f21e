#include "abc/encoder.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>

#include <torch/script.h>

#include "abc/errors.hpp"

namespace abc {
namespace {

using nlohmann::json;

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::backbone: return "backbone";
  }
  return "?";
}

LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::conv, LayerKind::avg_pool, LayerKind::max_pool, LayerKind::global_avg_pool,
                 LayerKind::flatten, LayerKind::dense, LayerKind::backbone}) {
    if (s == kind_name(k)) return k;
  }
  throw SchemaError("unknown layer kind '" + s + "'");
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "linear") return Activation::linear;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw SchemaError("unknown activation '" + s + "'");
}

torch::Tensor activate(const torch::Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu: return torch::relu(x);
    case Activation::tanh: return torch::tanh(x);
    case Activation::linear: break;
  }
  return x;
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw SchemaError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("field '") + key + "': " + e.what());
  }
}

void fill_uniform(torch::Tensor t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(static_cast<std::size_t>(t.numel()));
  for (double& v : values) v = dist(rng);
  torch::NoGradGuard guard;
  t.copy_(torch::from_blob(values.data(), t.sizes(), torch::kFloat64).to(t.dtype()));
}

}  // namespace

LayerSpec LayerSpec::conv(int units, int kernel, int stride, Activation act) {
  return {LayerKind::conv, units, kernel, stride, act, {}};
}
LayerSpec LayerSpec::avg_pool(int window) { return {LayerKind::avg_pool, 0, window, window, Activation::linear, {}}; }
LayerSpec LayerSpec::max_pool(int window) { return {LayerKind::max_pool, 0, window, window, Activation::linear, {}}; }
LayerSpec LayerSpec::global_avg_pool() { return {LayerKind::global_avg_pool, 0, 1, 1, Activation::linear, {}}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::flatten, 0, 1, 1, Activation::linear, {}}; }
LayerSpec LayerSpec::dense(int units, Activation act) { return {LayerKind::dense, units, 1, 1, act, {}}; }
LayerSpec LayerSpec::backbone(std::string weights, int out_channels, int out_size) {
  return {LayerKind::backbone, out_channels, out_size, 1, Activation::linear, std::move(weights)};
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void EncoderConfig::validate() const {
  if (input.height < 1 || input.width < 1 || input.channels < 1) throw ConfigError("input shape must be positive");
  if (embedding_dim < 1) throw ConfigError("embedding dimension must be positive");
  if (layers.empty()) throw ConfigError("encoder has no layers");
  const LayerSpec& last = layers.back();
  if (last.kind != LayerKind::dense || last.units != embedding_dim || last.activation != Activation::linear) {
    throw ConfigError("final layer must be a linear dense layer with " + std::to_string(embedding_dim) + " units");
  }
  int c = input.channels, h = input.height, w = input.width;
  bool flat = false;
  bool has_backbone = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + kind_name(l.kind) + ")";
    const bool spatial = l.kind != LayerKind::dense;
    if (spatial && l.kind != LayerKind::flatten && flat) throw ConfigError(where + " follows a flattened tensor");
    switch (l.kind) {
      case LayerKind::conv:
        if (l.units < 1 || l.kernel < 1 || l.stride < 1) throw ConfigError(where + " needs positive units/kernel/stride");
        if (h < l.kernel || w < l.kernel) throw ConfigError(where + " kernel exceeds the feature map");
        h = (h - l.kernel) / l.stride + 1;
        w = (w - l.kernel) / l.stride + 1;
        c = l.units;
        break;
      case LayerKind::avg_pool:
      case LayerKind::max_pool:
        if (l.kernel < 1 || h < l.kernel || w < l.kernel) throw ConfigError(where + " window exceeds the feature map");
        h /= l.kernel;
        w /= l.kernel;
        break;
      case LayerKind::global_avg_pool:
        h = w = 1;
        flat = true;
        break;
      case LayerKind::flatten:
        if (flat) throw ConfigError(where + " flattens twice");
        c = c * h * w;
        h = w = 1;
        flat = true;
        break;
      case LayerKind::dense:
        if (!flat) throw ConfigError(where + " needs a flatten or global pool before it");
        if (l.units < 1) throw ConfigError(where + " needs positive units");
        c = l.units;
        break;
      case LayerKind::backbone:
        if (i != 0) throw ConfigError("backbone must be the first layer");
        if (l.units < 1 || l.kernel < 1) throw ConfigError(where + " needs its output shape");
        c = l.units;
        h = w = l.kernel;
        has_backbone = true;
        break;
    }
  }
  if (pretrained_backbone && !has_backbone) throw ConfigError("pretrained_backbone set without a backbone layer");
}

nlohmann::json EncoderConfig::to_json() const {
  json layers_j = json::array();
  for (const auto& l : layers) {
    json e = {{"kind", kind_name(l.kind)}};
    switch (l.kind) {
      case LayerKind::conv:
        e["units"] = l.units, e["kernel"] = l.kernel, e["stride"] = l.stride;
        e["activation"] = activation_name(l.activation);
        break;
      case LayerKind::avg_pool:
      case LayerKind::max_pool:
        e["window"] = l.kernel;
        break;
      case LayerKind::dense:
        e["units"] = l.units, e["activation"] = activation_name(l.activation);
        break;
      case LayerKind::backbone:
        e["weights"] = l.weights, e["out_channels"] = l.units, e["out_size"] = l.kernel;
        break;
      default:
        break;
    }
    layers_j.push_back(std::move(e));
  }
  return {{"input", {input.height, input.width, input.channels}},
          {"embedding_dim", embedding_dim},
          {"pretrained_backbone", pretrained_backbone},
          {"freeze_backbone", freeze_backbone},
          {"layers", std::move(layers_j)}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("encoder block must be an object");
  EncoderConfig c;
  const auto in = field<std::vector<int>>(j, "input");
  if (in.size() != 3) throw SchemaError("encoder input must be [height, width, channels]");
  c.input = {in[0], in[1], in[2]};
  c.embedding_dim = field<int>(j, "embedding_dim");
  c.pretrained_backbone = j.value("pretrained_backbone", false);
  c.freeze_backbone = j.value("freeze_backbone", true);
  const auto& ls = j.contains("layers") ? j.at("layers") : throw SchemaError("missing field 'layers'");
  if (!ls.is_array()) throw SchemaError("encoder layers must be an array");
  for (const auto& e : ls) {
    const LayerKind kind = parse_kind(field<std::string>(e, "kind"));
    switch (kind) {
      case LayerKind::conv:
        c.layers.push_back(LayerSpec::conv(field<int>(e, "units"), field<int>(e, "kernel"), e.value("stride", 1),
                                           parse_activation(e.value("activation", std::string("relu")))));
        break;
      case LayerKind::avg_pool: c.layers.push_back(LayerSpec::avg_pool(field<int>(e, "window"))); break;
      case LayerKind::max_pool: c.layers.push_back(LayerSpec::max_pool(field<int>(e, "window"))); break;
      case LayerKind::global_avg_pool: c.layers.push_back(LayerSpec::global_avg_pool()); break;
      case LayerKind::flatten: c.layers.push_back(LayerSpec::flatten()); break;
      case LayerKind::dense:
        c.layers.push_back(LayerSpec::dense(field<int>(e, "units"),
                                            parse_activation(e.value("activation", std::string("linear")))));
        break;
      case LayerKind::backbone:
        c.layers.push_back(LayerSpec::backbone(field<std::string>(e, "weights"), field<int>(e, "out_channels"),
                                               field<int>(e, "out_size")));
        break;
    }
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw SchemaError(std::string("encoder: ") + e.what());
  }
  return c;
}

std::string EncoderConfig::hash() const { return fnv1a_hex(to_json().dump()); }

EncoderConfig EncoderConfig::shapes3d() {
  using L = LayerSpec;
  EncoderConfig c;
  c.input = {64, 64, 3};
  c.embedding_dim = 64;
  c.layers = {L::conv(32, 3), L::conv(32, 3), L::conv(64, 3, 2), L::conv(64, 3), L::conv(128, 3),
              L::conv(128, 3, 2), L::flatten(), L::dense(128, Activation::relu), L::dense(64)};
  return c;
}

EncoderConfig EncoderConfig::mnist(int embedding_dim) {
  using L = LayerSpec;
  EncoderConfig c;
  c.input = {28, 28, 1};
  c.embedding_dim = embedding_dim;
  c.layers = {L::conv(32, 3), L::conv(32, 3), L::conv(32, 3, 2), L::conv(32, 3), L::conv(32, 3),
              L::flatten(), L::dense(128, Activation::relu), L::dense(embedding_dim)};
  return c;
}

EncoderConfig EncoderConfig::pose(const std::string& backbone_weights) {
  using L = LayerSpec;
  EncoderConfig c;
  c.input = {224, 224, 3};
  c.embedding_dim = 64;
  c.pretrained_backbone = true;
  c.freeze_backbone = false;
  // ResNet50 through conv4_block6 yields 1024 x 14 x 14 at 224 px
  c.layers = {L::backbone(backbone_weights, 1024, 14), L::conv(256, 3), L::global_avg_pool(),
              L::dense(128, Activation::tanh), L::dense(64)};
  return c;
}

EncoderConfig EncoderConfig::procedural_desk(int embedding_dim) {
  using L = LayerSpec;
  EncoderConfig c;
  c.input = {64, 64, 3};
  c.embedding_dim = embedding_dim;
  c.layers = {L::avg_pool(2),      L::conv(16, 3), L::conv(16, 3, 2), L::conv(32, 3), L::conv(32, 3, 2),
              L::flatten(),        L::dense(128, Activation::relu), L::dense(embedding_dim)};
  return c;
}

EncoderConfig EncoderConfig::glyph_desk(int canvas, int embedding_dim) {
  using L = LayerSpec;
  EncoderConfig c;
  c.input = {canvas, canvas, 3};
  c.embedding_dim = embedding_dim;
  c.layers = {L::conv(16, 3), L::conv(16, 3, 2), L::conv(32, 3), L::conv(32, 3, 2),
              L::flatten(), L::dense(128, Activation::relu), L::dense(embedding_dim)};
  return c;
}

struct Backbone : torch::nn::Module {
  explicit Backbone(torch::jit::script::Module m) : module(std::move(m)) {}
  torch::Tensor forward(torch::Tensor x) { return module.forward({x}).toTensor(); }
  torch::jit::script::Module module;
};

EncoderImpl::EncoderImpl(EncoderConfig config, std::uint64_t seed, torch::Dtype dtype)
    : config_(std::move(config)), dtype_(dtype) {
  config_.validate();
  int c = config_.input.channels, h = config_.input.height, w = config_.input.width;
  int features = 0;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const LayerSpec& l = config_.layers[i];
    const std::string name = std::string(kind_name(l.kind)) + std::to_string(i);
    switch (l.kind) {
      case LayerKind::conv: {
        auto m = register_module(name, torch::nn::Conv2d(torch::nn::Conv2dOptions(c, l.units, l.kernel).stride(l.stride)));
        ops_.emplace_back(m);
        h = (h - l.kernel) / l.stride + 1;
        w = (w - l.kernel) / l.stride + 1;
        c = l.units;
        break;
      }
      case LayerKind::avg_pool:
        ops_.emplace_back(torch::nn::AvgPool2d(torch::nn::AvgPool2dOptions(l.kernel)));
        h /= l.kernel, w /= l.kernel;
        break;
      case LayerKind::max_pool:
        ops_.emplace_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(l.kernel)));
        h /= l.kernel, w /= l.kernel;
        break;
      case LayerKind::global_avg_pool:
        ops_.emplace_back(torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(1)));
        features = c;
        break;
      case LayerKind::flatten:
        ops_.emplace_back(torch::nn::Flatten());
        features = c * h * w;
        break;
      case LayerKind::dense: {
        auto m = register_module(name, torch::nn::Linear(features, l.units));
        ops_.emplace_back(m);
        features = l.units;
        break;
      }
      case LayerKind::backbone: {
        if (!std::filesystem::exists(l.weights)) {
          throw MissingArtifactError("backbone weights '" + l.weights + "' not found");
        }
        auto jit = torch::jit::load(l.weights);
        jit.to(dtype_);
        for (const auto& p : jit.parameters()) {
          p.set_requires_grad(!config_.freeze_backbone);
          backbone_params_.push_back(p);
        }
        ops_.emplace_back(std::make_shared<Backbone>(std::move(jit)));
        c = l.units;
        h = w = l.kernel;
        break;
      }
    }
  }
  fan_in_uniform_init(*this, seed, kEncoderInitScale, /*zero_bias=*/true);
  this->to(dtype_);
}

torch::Tensor EncoderImpl::forward(torch::Tensor x) {
  for (std::size_t i = 0; i < ops_.size(); ++i) {
    x = ops_[i].forward(x);
    if (config_.layers[i].kind == LayerKind::global_avg_pool) x = x.flatten(1);
    x = activate(x, config_.layers[i].activation);
  }
  return x;
}

std::vector<torch::Tensor> EncoderImpl::trainable_parameters() {
  std::vector<torch::Tensor> out = parameters();
  if (!config_.freeze_backbone) out.insert(out.end(), backbone_params_.begin(), backbone_params_.end());
  return out;
}

void fan_in_uniform_init(torch::nn::Module& module, std::uint64_t seed, double scale, bool zero_bias) {
  Rng rng(seed);
  // modules(true) needs shared_from_this, unavailable inside constructors
  std::vector<torch::nn::Module*> all = {&module};
  for (const auto& m : module.modules(/*include_self=*/false)) all.push_back(m.get());
  for (auto* m : all) {
    torch::Tensor weight, bias;
    if (auto* conv = m->as<torch::nn::Conv2dImpl>()) {
      weight = conv->weight, bias = conv->bias;
    } else if (auto* lin = m->as<torch::nn::LinearImpl>()) {
      weight = lin->weight, bias = lin->bias;
    } else {
      continue;
    }
    const double fan_in = static_cast<double>(weight.numel() / weight.size(0));
    const double bound = scale / std::sqrt(fan_in);
    fill_uniform(weight, bound, rng);
    if (!bias.defined()) continue;
    if (zero_bias) {
      torch::NoGradGuard guard;
      bias.zero_();
    } else {
      fill_uniform(bias, bound, rng);
    }
  }
}

torch::Tensor to_batch(const std::vector<Observation>& observations, const InputShape& shape, torch::Dtype dtype) {
  if (observations.empty()) throw ContractError("cannot embed an empty batch");
  const auto n = static_cast<std::int64_t>(observations.size());
  torch::Tensor out = torch::empty({n, shape.height, shape.width, shape.channels}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  const std::size_t per = static_cast<std::size_t>(shape.height) * shape.width * shape.channels;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const Image& img = observations[i].image;
    if (img.height != shape.height || img.width != shape.width || img.channels != shape.channels) {
      throw ContractError("observation " + std::to_string(i) + " is " + std::to_string(img.height) + "x" +
                          std::to_string(img.width) + "x" + std::to_string(img.channels) + ", encoder expects " +
                          std::to_string(shape.height) + "x" + std::to_string(shape.width) + "x" +
                          std::to_string(shape.channels));
    }
    std::copy(img.pixels.begin(), img.pixels.end(), dst + i * per);
  }
  return out.permute({0, 3, 1, 2}).contiguous().to(dtype);
}

torch::Tensor embed_batch(Encoder& encoder, const std::vector<Observation>& observations) {
  torch::NoGradGuard guard;
  return encoder->forward(to_batch(observations, encoder->config().input, encoder->dtype()));
}

torch::Tensor embed_all(Encoder& encoder, const std::vector<Observation>& observations, std::size_t chunk) {
  std::vector<torch::Tensor> parts;
  for (std::size_t start = 0; start < observations.size(); start += chunk) {
    const std::size_t end = std::min(observations.size(), start + chunk);
    parts.push_back(embed_batch(encoder, {observations.begin() + static_cast<std::ptrdiff_t>(start),
                                          observations.begin() + static_cast<std::ptrdiff_t>(end)}));
  }
  return torch::cat(parts, 0);
}

}  // namespace abc
