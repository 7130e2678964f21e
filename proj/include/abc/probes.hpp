#pragma once

// Representation probes: MINE mutual-information estimates, classifier
// probes, per-class retrieval and pose codebook lookup.

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "abc/abc_loss.hpp"
#include "abc/factor_model.hpp"

namespace abc {

struct NoiseSpec {
  double sigma = 0.0;
  void validate() const;  // DomainError when negative or non-finite
};

// Zero-mean Gaussian noise, i.i.d. per entry.
torch::Tensor add_noise(const torch::Tensor& x, const NoiseSpec& noise, Rng& rng);

// T(u, g): MLP over concat(embedding, factor value) with 3x128 ReLU layers.
class StatisticsNetworkImpl : public torch::nn::Module {
 public:
  StatisticsNetworkImpl(int embedding_dim, std::uint64_t seed, int hidden = 128);
  // embeddings (N, E), values (N) or (N, 1) -> (N)
  torch::Tensor forward(const torch::Tensor& embeddings, const torch::Tensor& values);

 private:
  torch::nn::Linear l1{nullptr}, l2{nullptr}, l3{nullptr}, out{nullptr};
};
TORCH_MODULE(StatisticsNetwork);

// log mean exp(t_marginal) - mean t_joint, log-sum-exp stabilized. Throws
// ContractError on empty input, NumericalError on a non-finite result.
torch::Tensor mine_loss(const torch::Tensor& t_joint, const torch::Tensor& t_marginal);
torch::Tensor mine_loss(StatisticsNetwork& T, const torch::Tensor& joint_u, const torch::Tensor& joint_g,
                        const torch::Tensor& marginal_g);

struct MineBudget {
  int batch = 256;
  int steps = 5000;
  double lr = 3e-4;
  int eval_samples = 256000;  // drawn with replacement
};

struct MiEstimate {
  double nats = 0.0;  // clamped at zero
  double raw = 0.0;
};

// Trains a fresh statistics network on (embedding + noise, factor) pairs and
// reports the average neural information measure over eval_samples draws.
// Throws ProbeError when training diverges.
MiEstimate estimate_mi(const torch::Tensor& embeddings, const torch::Tensor& factor_values, const NoiseSpec& noise,
                       const MineBudget& budget, std::uint64_t seed);

// `count` logarithmically spaced values in [lo, hi].
std::vector<double> log_space(double lo, double hi, int count);

struct ClassifierBudget {
  int batch = 256;
  int steps = 1500;
  double lr = 1e-3;
  double test_fraction = 0.25;
};

struct ProbeResult {
  double accuracy = 0.0;
  double chance = 0.0;  // 1 / classes
  int classes = 0;
};

// 3x32 ReLU MLP classifier on a disjoint train/test split. Labels are
// integer class ids. Throws ProbeError for a single-class input.
ProbeResult classifier_probe(const torch::Tensor& embeddings, const std::vector<int>& labels, const NoiseSpec& noise,
                             const ClassifierBudget& budget, std::uint64_t seed);

// For each class (map order), the gallery index most similar to `query`;
// ties go to the lowest index. Throws ContractError on an empty class.
std::vector<std::size_t> retrieve_per_class(const torch::Tensor& query, const torch::Tensor& gallery,
                                            const std::vector<std::vector<std::size_t>>& classes,
                                            SimilarityMetric metric);

using Quaternion = std::array<double, 4>;  // (w, x, y, z)

Quaternion quaternion_about_z(double radians);

struct Codebook {
  torch::Tensor embeddings;  // (m, E)
  std::vector<Quaternion> rotations;
  SimilarityMetric metric{MetricKind::cosine};
  void validate() const;  // ContractError / DomainError
};

// Rotation of the most similar entry (hard argmax, lowest index on ties).
Quaternion codebook_lookup(const torch::Tensor& query, const Codebook& codebook);
std::size_t codebook_argmax(const torch::Tensor& query, const Codebook& codebook);

// 2 acos(|<q1, q2>|) in degrees. Throws DomainError on non-unit input.
double geodesic_error(const Quaternion& q1, const Quaternion& q2);

struct ErrorSummary {
  double median = 0.0;
  std::vector<double> thresholds;
  std::vector<double> accuracy;  // fraction strictly below each threshold
};

ErrorSummary summarize_errors(const std::vector<double>& errors, const std::vector<double>& thresholds);

// Mean of per-codebook summaries, field by field.
ErrorSummary average_summaries(const std::vector<ErrorSummary>& summaries);

struct CodebookProtocolResult {
  ErrorSummary mean;
  std::vector<ErrorSummary> per_codebook;
  std::vector<std::vector<std::size_t>> entries;  // pool indices of each codebook
};

// Evaluation over `codebooks` random codebooks of `size` entries drawn
// without replacement from `pool`; `mean` averages the per-codebook
// summaries of the queries' geodesic errors.
CodebookProtocolResult random_codebook_protocol(const torch::Tensor& queries, const std::vector<Quaternion>& truth,
                                      const Codebook& pool, std::size_t size, int codebooks,
                                      const std::vector<double>& thresholds, std::uint64_t seed);

}  // namespace abc
