#pragma once

// Configurable convolutional encoders. A config is a flat layer list; the
// encoder is built from it with fan-in uniform initialization drawn from a
// seeded generator, so (config, seed) fully determines the initial weights.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "abc/factor_model.hpp"

namespace abc {

enum class Activation { linear, relu, tanh };
enum class LayerKind { conv, avg_pool, max_pool, global_avg_pool, flatten, dense, backbone };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int units = 0;   // conv channels / dense width
  int kernel = 1;  // conv kernel, pool window
  int stride = 1;
  Activation activation = Activation::linear;
  std::string weights;  // backbone only: TorchScript module path

  static LayerSpec conv(int units, int kernel, int stride = 1, Activation act = Activation::relu);
  static LayerSpec avg_pool(int window);
  static LayerSpec max_pool(int window);
  static LayerSpec global_avg_pool();
  static LayerSpec flatten();
  static LayerSpec dense(int units, Activation act = Activation::linear);
  // Stand-in for a large pretrained trunk loaded from TorchScript. The module
  // must map (N, C, H, W) to (N, units, kernel, kernel) feature maps.
  static LayerSpec backbone(std::string weights, int out_channels, int out_size);

  bool operator==(const LayerSpec&) const = default;
};

struct InputShape {
  int height = 0;
  int width = 0;
  int channels = 0;
  bool operator==(const InputShape&) const = default;
};

struct EncoderConfig {
  std::vector<LayerSpec> layers;
  InputShape input;
  int embedding_dim = 0;
  bool pretrained_backbone = false;  // requires a backbone layer
  bool freeze_backbone = true;

  // Throws ConfigError: empty list, final layer not a linear dense of E
  // units, spatial size collapsing, dense before flatten, ...
  void validate() const;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);  // SchemaError on bad input
  // 16 hex digits of FNV-1a over the canonical JSON dump.
  std::string hash() const;

  bool operator==(const EncoderConfig&) const = default;

  // Full-size architectures.
  static EncoderConfig shapes3d();
  static EncoderConfig mnist(int embedding_dim = 8);
  static EncoderConfig pose(const std::string& backbone_weights);
  // Narrow variants sized for a single CPU core.
  static EncoderConfig procedural_desk(int embedding_dim = 64);
  static EncoderConfig glyph_desk(int canvas = 32, int embedding_dim = 32);
};

std::string fnv1a_hex(const std::string& bytes);

class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(EncoderConfig config, std::uint64_t seed, torch::Dtype dtype = torch::kFloat32);

  // (N, C, H, W) -> (N, E)
  torch::Tensor forward(torch::Tensor x);

  const EncoderConfig& config() const { return config_; }
  torch::Dtype dtype() const { return dtype_; }
  // Parameters the optimizer should update (excludes a frozen backbone).
  std::vector<torch::Tensor> trainable_parameters();

 private:
  EncoderConfig config_;
  torch::Dtype dtype_;
  std::vector<torch::nn::AnyModule> ops_;
  std::vector<torch::Tensor> backbone_params_;
};
TORCH_MODULE(Encoder);

// Stacks observations into an (N, C, H, W) tensor. Throws ContractError when
// an image does not match `shape`.
torch::Tensor to_batch(const std::vector<Observation>& observations, const InputShape& shape,
                       torch::Dtype dtype = torch::kFloat32);

// Inference-mode embedding: no gradient tape, deterministic.
torch::Tensor embed_batch(Encoder& encoder, const std::vector<Observation>& observations);

// Embeds in chunks of `chunk` observations to bound memory.
torch::Tensor embed_all(Encoder& encoder, const std::vector<Observation>& observations, std::size_t chunk = 256);

// Overwrites every weight with U(-scale/sqrt(fan_in), +scale/sqrt(fan_in)).
// Biases share the bound, or are zeroed with `zero_bias`.
void fan_in_uniform_init(torch::nn::Module& module, std::uint64_t seed, double scale = 1.0, bool zero_bias = false);

// Encoder weights use scale sqrt(6) (variance 2 / fan_in, which keeps ReLU
// activations at unit scale through depth) and zero biases.
inline constexpr double kEncoderInitScale = 2.449489742783178;

}  // namespace abc
