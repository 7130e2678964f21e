#pragma once

// Set-correspondence losses on embedding matrices (one row per set element).
// All kernels are differentiable torch expressions and work in float or
// double; gradients flow through every term, including the soft neighbours.

#include <string>
#include <string_view>

#include <torch/torch.h>

namespace abc {

enum class MetricKind { cosine, negative_euclidean, negative_squared_euclidean };

struct SimilarityMetric {
  MetricKind kind = MetricKind::negative_squared_euclidean;

  std::string name() const;
  // Accepts "cosine", "negative_euclidean"/"l2", "negative_squared_euclidean"/"squared_l2".
  static SimilarityMetric parse(std::string_view text);
  // Default temperature: 0.1 for cosine, 1.0 for the Euclidean family.
  double default_tau() const;

  bool operator==(const SimilarityMetric&) const = default;
};

// Strictly positive softmax temperature.
class Temperature {
 public:
  explicit Temperature(double tau);
  double value() const { return tau_; }

 private:
  double tau_;
};

// n x m matrix with entry (i, j) = s(u_i, v_j).
// Throws ContractError on shape mismatch, DomainError on a zero row under cosine.
torch::Tensor pairwise_similarity(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric);

struct SoftNeighbor {
  torch::Tensor point;    // E-vector: sum_j alpha_j v_j
  torch::Tensor weights;  // m-vector alpha, softmax of s(u, v_j) / tau
};

SoftNeighbor soft_nearest_neighbor(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric,
                                   Temperature tau);

// Soft neighbours of every row of `queries` in `v` (n x E).
torch::Tensor soft_neighbors(const torch::Tensor& queries, const torch::Tensor& v, SimilarityMetric metric,
                             Temperature tau);

// L(U, V) = -(1/n) sum_i log softmax_j( s(u_j, u~_i) / tau )[i], u~_i the soft
// neighbour of u_i in V. Returns a scalar tensor; throws NumericalError on
// non-finite results.
torch::Tensor correspondence_loss(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric,
                                  Temperature tau);

// L(U, V) + L(V, U).
torch::Tensor abc_loss(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric, Temperature tau);

// Directional loss with soft neighbours taken from the first augmentation
// (queries1 against v1) and correspondence scored against the second
// augmentation (candidates2).
torch::Tensor correspondence_loss_double_aug(const torch::Tensor& queries1, const torch::Tensor& candidates2,
                                             const torch::Tensor& v1, SimilarityMetric metric, Temperature tau);

// L(U1,U2 -> V1) + L(V1,V2 -> U1). U1/U2 and V1/V2 must be row-aligned.
torch::Tensor abc_loss_double_aug(const torch::Tensor& u1, const torch::Tensor& u2, const torch::Tensor& v1,
                                  const torch::Tensor& v2, SimilarityMetric metric, Temperature tau);

// Embedding-space scale below which the loss cannot tell points apart:
// tau (Euclidean), sqrt(tau) (squared Euclidean), tau as an angle (cosine).
double characteristic_scale(SimilarityMetric metric, Temperature tau);

}  // namespace abc
