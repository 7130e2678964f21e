#include "abc/abc_loss.hpp"

#include <cmath>

#include "abc/errors.hpp"

namespace abc {
namespace {

constexpr double kNormEps = 1e-12;

void check_set(const torch::Tensor& t, const char* what) {
  if (t.dim() != 2 || t.size(0) < 1 || t.size(1) < 1) {
    throw ContractError(std::string(what) + " must be a non-empty n x E matrix");
  }
}

torch::Tensor normalized_rows(const torch::Tensor& x) {
  const torch::Tensor norms = x.norm(2, /*dim=*/1, /*keepdim=*/true);
  if ((norms == 0).any().item<bool>()) throw DomainError("cosine similarity is undefined for a zero vector");
  return x / norms.clamp_min(kNormEps);
}

// sqrt with a zero subgradient at 0 (plain sqrt backpropagates NaN there).
torch::Tensor safe_sqrt(const torch::Tensor& x) {
  const torch::Tensor positive = x > 0;
  const torch::Tensor filled = torch::where(positive, x, torch::ones_like(x));
  return torch::where(positive, filled.sqrt(), torch::zeros_like(x));
}

// Row-wise log-sum-exp with the row maximum subtracted before exponentiating.
torch::Tensor row_logsumexp(const torch::Tensor& logits) {
  const torch::Tensor peak = std::get<0>(logits.max(/*dim=*/1, /*keepdim=*/true)).detach();
  return (peak + (logits - peak).exp().sum(/*dim=*/1, /*keepdim=*/true).log()).squeeze(1);
}

torch::Tensor ensure_finite(torch::Tensor value, const char* what) {
  if (!torch::isfinite(value).all().item<bool>()) {
    throw NumericalError(std::string(what) + " produced a non-finite value");
  }
  return value;
}

}  // namespace

std::string SimilarityMetric::name() const {
  switch (kind) {
    case MetricKind::cosine: return "cosine";
    case MetricKind::negative_euclidean: return "negative_euclidean";
    case MetricKind::negative_squared_euclidean: return "negative_squared_euclidean";
  }
  return "unknown";
}

SimilarityMetric SimilarityMetric::parse(std::string_view text) {
  if (text == "cosine") return {MetricKind::cosine};
  if (text == "negative_euclidean" || text == "l2") return {MetricKind::negative_euclidean};
  if (text == "negative_squared_euclidean" || text == "squared_l2") {
    return {MetricKind::negative_squared_euclidean};
  }
  throw ConfigError("unknown similarity metric '" + std::string(text) + "'");
}

double SimilarityMetric::default_tau() const { return kind == MetricKind::cosine ? 0.1 : 1.0; }

Temperature::Temperature(double tau) : tau_(tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw DomainError("temperature must be a finite positive number");
}

torch::Tensor pairwise_similarity(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric) {
  check_set(u, "U");
  check_set(v, "V");
  if (u.size(1) != v.size(1)) {
    throw ContractError("embedding dimensions differ: " + std::to_string(u.size(1)) + " vs " +
                        std::to_string(v.size(1)));
  }
  switch (metric.kind) {
    case MetricKind::cosine:
      return normalized_rows(u).matmul(normalized_rows(v).transpose(0, 1));
    case MetricKind::negative_euclidean:
      return -safe_sqrt((u.unsqueeze(1) - v.unsqueeze(0)).pow(2).sum(-1));
    case MetricKind::negative_squared_euclidean:
      return -(u.unsqueeze(1) - v.unsqueeze(0)).pow(2).sum(-1);
  }
  throw ContractError("unhandled metric");
}

torch::Tensor soft_neighbors(const torch::Tensor& queries, const torch::Tensor& v, SimilarityMetric metric,
                             Temperature tau) {
  const torch::Tensor logits = pairwise_similarity(queries, v, metric) / tau.value();
  const torch::Tensor alpha = (logits - row_logsumexp(logits).unsqueeze(1)).exp();
  return alpha.matmul(v);
}

SoftNeighbor soft_nearest_neighbor(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric,
                                   Temperature tau) {
  if (u.dim() != 1) throw ContractError("query must be a single embedding vector");
  const torch::Tensor logits = pairwise_similarity(u.unsqueeze(0), v, metric) / tau.value();
  const torch::Tensor alpha = (logits - row_logsumexp(logits).unsqueeze(1)).exp();
  return {alpha.matmul(v).squeeze(0), alpha.squeeze(0)};
}

torch::Tensor correspondence_loss_double_aug(const torch::Tensor& queries1, const torch::Tensor& candidates2,
                                             const torch::Tensor& v1, SimilarityMetric metric, Temperature tau) {
  check_set(queries1, "U(1)");
  check_set(candidates2, "U(2)");
  if (!queries1.sizes().equals(candidates2.sizes())) {
    throw ContractError("augmented embedding sets must be row-aligned with equal shapes");
  }
  const torch::Tensor neighbors = soft_neighbors(queries1, v1, metric, tau);
  // logits(i, j) = s(u_j, u~_i) / tau; the matching index is the diagonal
  const torch::Tensor logits = pairwise_similarity(neighbors, candidates2, metric) / tau.value();
  const torch::Tensor per_element = row_logsumexp(logits) - logits.diagonal();
  return ensure_finite(per_element.mean(), "correspondence loss");
}

torch::Tensor correspondence_loss(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric,
                                  Temperature tau) {
  return correspondence_loss_double_aug(u, u, v, metric, tau);
}

torch::Tensor abc_loss(const torch::Tensor& u, const torch::Tensor& v, SimilarityMetric metric, Temperature tau) {
  return correspondence_loss(u, v, metric, tau) + correspondence_loss(v, u, metric, tau);
}

torch::Tensor abc_loss_double_aug(const torch::Tensor& u1, const torch::Tensor& u2, const torch::Tensor& v1,
                                  const torch::Tensor& v2, SimilarityMetric metric, Temperature tau) {
  check_set(v1, "V(1)");
  check_set(v2, "V(2)");
  if (!v1.sizes().equals(v2.sizes())) {
    throw ContractError("augmented embedding sets must be row-aligned with equal shapes");
  }
  return correspondence_loss_double_aug(u1, u2, v1, metric, tau) +
         correspondence_loss_double_aug(v1, v2, u1, metric, tau);
}

double characteristic_scale(SimilarityMetric metric, Temperature tau) {
  switch (metric.kind) {
    case MetricKind::negative_squared_euclidean: return std::sqrt(tau.value());
    case MetricKind::negative_euclidean:
    case MetricKind::cosine: return tau.value();
  }
  return tau.value();
}

}  // namespace abc
