#pragma once

// Principal components and rank correlation for probe reports and plots.

#include <vector>

#include <torch/torch.h>

namespace abc {

struct Pca {
  torch::Tensor mean;        // (E) float64
  torch::Tensor components;  // (E, E) columns by descending variance
  torch::Tensor variances;   // (E) descending, clamped at zero
  // variances / total; uniform when every sample is identical.
  std::vector<double> fractions;

  // (N, E) -> (N, k) scores on the leading k components.
  torch::Tensor project(const torch::Tensor& x, int k) const;
};

// Eigendecomposition of the sample covariance. Throws ContractError for
// fewer than two rows.
Pca fit_pca(const torch::Tensor& x);

// Pearson correlation of average ranks (ties share the mean rank). Throws
// ContractError on length mismatch or fewer than two points, DomainError
// when either input is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace abc
