#pragma once

// Scalar reference implementations of the set-correspondence formulas, written
// as direct loops over std::vector<double> with no tensor code. Used as
// independent oracles for the tensor kernels.

#include <cmath>
#include <vector>

#include <torch/torch.h>

#include "abc/abc_loss.hpp"

namespace abc::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline double similarity(const Vec& u, const Vec& v, MetricKind kind) {
  double dot = 0, uu = 0, vv = 0, d2 = 0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    dot += u[k] * v[k];
    uu += u[k] * u[k];
    vv += v[k] * v[k];
    d2 += (u[k] - v[k]) * (u[k] - v[k]);
  }
  switch (kind) {
    case MetricKind::cosine: return dot / (std::sqrt(uu) * std::sqrt(vv));
    case MetricKind::negative_euclidean: return -std::sqrt(d2);
    case MetricKind::negative_squared_euclidean: return -d2;
  }
  return 0;
}

// alpha_j = exp(s(u, v_j)/tau) / sum_k exp(s(u, v_k)/tau), evaluated in long double.
inline Vec soft_weights(const Vec& u, const Mat& v, MetricKind kind, double tau) {
  std::vector<long double> e(v.size());
  long double total = 0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    e[j] = std::exp(static_cast<long double>(similarity(u, v[j], kind)) / tau);
    total += e[j];
  }
  Vec alpha(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) alpha[j] = static_cast<double>(e[j] / total);
  return alpha;
}

inline Vec soft_neighbor(const Vec& u, const Mat& v, MetricKind kind, double tau) {
  const Vec alpha = soft_weights(u, v, kind, tau);
  Vec out(u.size(), 0.0);
  for (std::size_t j = 0; j < v.size(); ++j) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += alpha[j] * v[j][k];
  }
  return out;
}

// -(1/n) sum_i log[ exp(s(u2_i, n_i)/tau) / sum_j exp(s(u2_j, n_i)/tau) ],
// n_i the soft neighbour of u1_i in v1. The plain loss is u1 == u2.
inline double correspondence(const Mat& u1, const Mat& u2, const Mat& v1, MetricKind kind, double tau) {
  const std::size_t n = u1.size();
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec neighbor = soft_neighbor(u1[i], v1, kind, tau);
    long double denom = 0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<long double>(similarity(u2[j], neighbor, kind)) / tau);
    const long double numer = std::exp(static_cast<long double>(similarity(u2[i], neighbor, kind)) / tau);
    total += -std::log(numer / denom);
  }
  return static_cast<double>(total / n);
}

inline double abc(const Mat& u, const Mat& v, MetricKind kind, double tau) {
  return correspondence(u, u, v, kind, tau) + correspondence(v, v, u, kind, tau);
}

inline double abc_double_aug(const Mat& u1, const Mat& u2, const Mat& v1, const Mat& v2, MetricKind kind,
                             double tau) {
  return correspondence(u1, u2, v1, kind, tau) + correspondence(v1, v2, u1, kind, tau);
}

inline Mat to_mat(const torch::Tensor& t) {
  const torch::Tensor c = t.to(torch::kDouble).contiguous();
  Mat out(static_cast<std::size_t>(c.size(0)), Vec(static_cast<std::size_t>(c.size(1))));
  for (std::int64_t i = 0; i < c.size(0); ++i) {
    for (std::int64_t k = 0; k < c.size(1); ++k) out[i][k] = c[i][k].item<double>();
  }
  return out;
}

inline torch::Tensor to_tensor(const Mat& m) {
  torch::Tensor t = torch::empty({static_cast<std::int64_t>(m.size()), static_cast<std::int64_t>(m[0].size())},
                                 torch::kDouble);
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t k = 0; k < m[i].size(); ++k) t[i][k] = m[i][k];
  }
  return t;
}

// Central finite-difference gradient of a scalar function of several matrices.
template <class F>
std::vector<torch::Tensor> finite_difference(F&& f, std::vector<torch::Tensor> inputs, double h) {
  std::vector<torch::Tensor> grads;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    torch::Tensor g = torch::zeros_like(inputs[a]);
    auto flat = inputs[a].view(-1);
    auto gflat = g.view(-1);
    for (std::int64_t k = 0; k < flat.numel(); ++k) {
      const double orig = flat[k].item<double>();
      flat[k] = orig + h;
      const double up = f(inputs);
      flat[k] = orig - h;
      const double down = f(inputs);
      flat[k] = orig;
      gflat[k] = (up - down) / (2 * h);
    }
    grads.push_back(g);
  }
  return grads;
}

}  // namespace abc::oracle
