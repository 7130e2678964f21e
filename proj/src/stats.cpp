#include "abc/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "abc/errors.hpp"

namespace abc {

torch::Tensor Pca::project(const torch::Tensor& x, int k) const {
  if (k < 1 || k > components.size(1)) throw ContractError("projection rank out of range");
  return torch::matmul(x.to(torch::kFloat64) - mean, components.slice(1, 0, k));
}

Pca fit_pca(const torch::Tensor& x) {
  if (x.dim() != 2 || x.size(0) < 2) throw ContractError("PCA needs an (N >= 2, E) matrix");
  const torch::Tensor d = x.to(torch::kFloat64);
  Pca out;
  out.mean = d.mean(0);
  const torch::Tensor c = d - out.mean;
  const torch::Tensor cov = torch::matmul(c.t(), c) / static_cast<double>(d.size(0) - 1);
  // eigh returns ascending eigenvalues
  auto [vals, vecs] = torch::linalg_eigh(cov);
  out.variances = vals.flip(0).clamp_min(0.0).contiguous();
  out.components = vecs.flip(1).contiguous();
  const double total = out.variances.sum().item<double>();
  const auto n = static_cast<std::size_t>(out.variances.size(0));
  out.fractions.assign(n, 1.0 / static_cast<double>(n));
  if (total > 0.0) {
    for (std::size_t i = 0; i < n; ++i) out.fractions[i] = out.variances[static_cast<std::int64_t>(i)].item<double>() / total;
  }
  return out;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("spearman inputs differ in length");
  if (a.size() < 2) throw ContractError("spearman needs at least two points");
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DomainError("spearman of a constant input");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace abc
