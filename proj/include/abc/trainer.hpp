#pragma once

// ABC training loop, ABC-S combined objective and checkpointing.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "abc/abc_loss.hpp"
#include "abc/augmentations.hpp"
#include "abc/encoder.hpp"
#include "abc/set_curation.hpp"

namespace abc {

struct LossWeights {
  double abc_weight = 1.0;
  double supervised_weight = 0.0;
  void validate() const;  // ConfigError when negative or both zero
};

double combined_loss(double abc_value, double supervised_value, const LossWeights& weights);
torch::Tensor combined_loss(const torch::Tensor& abc_value, const torch::Tensor& supervised_value,
                            const LossWeights& weights);

// lr(step) = base * factor^floor(step / interval); interval 0 keeps it fixed.
struct StaircaseSchedule {
  double base = 1e-4;
  double factor = 0.5;
  std::int64_t interval = 0;
  double at(std::int64_t step) const;
};

// Spherical regression head: per Euler angle, two magnitude logits passed
// through sqrt-of-softmax and four quadrant logits.
struct SphericalOutput {
  torch::Tensor magnitudes;  // (N, angles, 2), rows on the unit circle, >= 0
  torch::Tensor quadrants;   // (N, angles, 4) logits
};

// `logits` is (N, angles * 6): [m0, m1, q0..q3] per angle.
SphericalOutput spherical_head(const torch::Tensor& logits, int angles);
// Target magnitudes (|sin|, |cos|) per angle, shape (N, angles, 2).
torch::Tensor spherical_magnitude_targets(const torch::Tensor& angles);
// Quadrant class from signs: 0 (+sin,+cos), 1 (+,-), 2 (-,+), 3 (-,-); zero counts as +.
torch::Tensor spherical_quadrant_targets(const torch::Tensor& angles);
// Mean over angles and rows of (1 - cos(m, target)) + cross-entropy(quadrant).
torch::Tensor spherical_loss(const SphericalOutput& out, const torch::Tensor& angles);
// Decodes the angle from magnitudes and the argmax quadrant.
torch::Tensor spherical_decode(const SphericalOutput& out);

struct TrainConfig {
  EncoderConfig encoder;
  SimilarityMetric metric{MetricKind::negative_squared_euclidean};
  double tau = 1.0;
  bool double_augmentation = false;
  TransformSpec augmentation;
  LossWeights weights;
  // ABC-S: spherical regression on these angle factors (radians) of set A and B
  std::vector<std::string> regression_factors;
  std::int64_t steps = 0;
  StaircaseSchedule lr;
  int pairs_per_step = 1;
  std::uint64_t seed = 0;
  torch::Dtype dtype = torch::kFloat32;
  std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const;  // ConfigError
};

// Supplies one pair of curated sets per call. `spec` names the factors of
// the source latents; regression factors are looked up in it.
struct PairSource {
  std::function<SetBatch(std::int64_t step, Rng& rng)> next;
  std::optional<FactorSpec> spec;
};

class TrainState {
 public:
  TrainState(const TrainConfig& config);

  Encoder encoder{nullptr};
  torch::nn::Linear head{nullptr};  // spherical head, only with regression factors
  std::unique_ptr<torch::optim::Adam> optimizer;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  Rng rng;  // drives curation and augmentation draws

  std::string config_hash() const { return config_hash_; }

  // File layout: one JSON header line (format, config hash, step, seed, rng
  // state) followed by a torch archive of weights and optimizer moments.
  void save(const std::string& path) const;
  // Throws MissingArtifactError when absent, ConfigError when the header's
  // config hash differs from `config`.
  static TrainState load(const std::string& path, const TrainConfig& config);

 private:
  std::string config_hash_;
};

std::string train_config_hash(const TrainConfig& config);

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double abc_loss = 0.0;
  double supervised_loss = 0.0;
  double lr = 0.0;
  double extraneous_fraction = 0.0;
};

// One optimizer step. Throws NumericalError on a non-finite loss before the
// weights are touched.
StepRecord train_step(TrainState& state, const TrainConfig& config, const PairSource& source);

struct TrainOutputs {
  std::string checkpoint_path;  // empty: no checkpoint
  std::string metrics_path;     // empty: no metrics stream
  std::string config_hash;      // recorded in metrics lines; empty: the train config hash
};

// Runs config.steps steps (continuing from `resume` when given). Every step
// appends one JSON line to metrics_path. On a non-finite loss the state
// before the failing step is checkpointed and NumericalError propagates.
TrainState train(const TrainConfig& config, const PairSource& source, const TrainOutputs& outputs = {},
                 std::optional<TrainState> resume = std::nullopt,
                 const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace abc
