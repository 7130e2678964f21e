#include "abc/probes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "abc/encoder.hpp"
#include "abc/errors.hpp"

namespace abc {
namespace {

torch::Tensor index_tensor(const std::vector<std::int64_t>& idx) {
  return torch::from_blob(const_cast<std::int64_t*>(idx.data()), {static_cast<std::int64_t>(idx.size())},
                          torch::kInt64)
      .clone();
}

std::vector<std::int64_t> draw_indices(std::int64_t n, int count, Rng& rng) {
  std::uniform_int_distribution<std::int64_t> dist(0, n - 1);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  for (auto& i : idx) i = dist(rng);
  return idx;
}

torch::Tensor noise_like(const torch::Tensor& x, double sigma, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, sigma);
  std::vector<float> values(static_cast<std::size_t>(x.numel()));
  for (float& v : values) v = static_cast<float>(gauss(rng));
  return torch::from_blob(values.data(), x.sizes(), torch::kFloat32).clone().to(x.dtype());
}

class ClassifierImpl : public torch::nn::Module {
 public:
  ClassifierImpl(int in, int classes, std::uint64_t seed)
      : l1(register_module("l1", torch::nn::Linear(in, 32))),
        l2(register_module("l2", torch::nn::Linear(32, 32))),
        l3(register_module("l3", torch::nn::Linear(32, 32))),
        out(register_module("out", torch::nn::Linear(32, classes))) {
    fan_in_uniform_init(*this, seed);
  }
  torch::Tensor forward(const torch::Tensor& x) {
    return out(torch::relu(l3(torch::relu(l2(torch::relu(l1(x)))))));
  }

 private:
  torch::nn::Linear l1, l2, l3, out;
};
TORCH_MODULE(Classifier);

}  // namespace

void NoiseSpec::validate() const {
  if (!std::isfinite(sigma) || sigma < 0) throw DomainError("noise sigma must be finite and >= 0");
}

torch::Tensor add_noise(const torch::Tensor& x, const NoiseSpec& noise, Rng& rng) {
  noise.validate();
  if (noise.sigma == 0) return x;
  return x + noise_like(x, noise.sigma, rng);
}

StatisticsNetworkImpl::StatisticsNetworkImpl(int embedding_dim, std::uint64_t seed, int hidden)
    : l1(register_module("l1", torch::nn::Linear(embedding_dim + 1, hidden))),
      l2(register_module("l2", torch::nn::Linear(hidden, hidden))),
      l3(register_module("l3", torch::nn::Linear(hidden, hidden))),
      out(register_module("out", torch::nn::Linear(hidden, 1))) {
  fan_in_uniform_init(*this, seed);
}

torch::Tensor StatisticsNetworkImpl::forward(const torch::Tensor& embeddings, const torch::Tensor& values) {
  const torch::Tensor x = torch::cat({embeddings, values.reshape({-1, 1}).to(embeddings.dtype())}, 1);
  return out(torch::relu(l3(torch::relu(l2(torch::relu(l1(x))))))).squeeze(1);
}

torch::Tensor mine_loss(const torch::Tensor& t_joint, const torch::Tensor& t_marginal) {
  if (t_joint.numel() == 0 || t_marginal.numel() == 0) throw ContractError("MINE batches must be non-empty");
  // max + log mean exp(t - max): exact when the statistics are constant
  const torch::Tensor m = t_marginal.max().detach();
  const torch::Tensor value = m + torch::log(torch::exp(t_marginal - m).mean()) - t_joint.mean();
  if (!torch::isfinite(value).item<bool>()) throw NumericalError("MINE loss is non-finite");
  return value;
}

torch::Tensor mine_loss(StatisticsNetwork& T, const torch::Tensor& joint_u, const torch::Tensor& joint_g,
                        const torch::Tensor& marginal_g) {
  return mine_loss(T->forward(joint_u, joint_g), T->forward(joint_u, marginal_g));
}

MiEstimate estimate_mi(const torch::Tensor& embeddings, const torch::Tensor& factor_values, const NoiseSpec& noise,
                       const MineBudget& budget, std::uint64_t seed) {
  noise.validate();
  if (embeddings.dim() != 2 || factor_values.dim() != 1 || embeddings.size(0) != factor_values.size(0)) {
    throw ContractError("estimate_mi needs (N, E) embeddings and N factor values");
  }
  if (embeddings.size(0) < 2) throw ContractError("estimate_mi needs at least two samples");
  torch::set_num_threads(1);
  const torch::Tensor u = embeddings.to(torch::kFloat32).contiguous();
  torch::Tensor g = factor_values.to(torch::kFloat32);
  // MI is invariant to affine maps of g; standardizing helps the optimizer
  const float sd = g.std().item<float>();
  g = sd > 0 ? (g - g.mean()) / sd : g - g.mean();
  const std::int64_t n = u.size(0);

  Rng rng(seed);
  StatisticsNetwork T(static_cast<int>(u.size(1)), seed + 17);
  torch::optim::Adam opt(T->parameters(), torch::optim::AdamOptions(budget.lr));
  for (int step = 0; step < budget.steps; ++step) {
    const torch::Tensor idx = index_tensor(draw_indices(n, budget.batch, rng));
    const torch::Tensor ub = add_noise(u.index_select(0, idx), noise, rng);
    const torch::Tensor gb = g.index_select(0, idx);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(budget.batch));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const torch::Tensor gm = gb.index_select(0, index_tensor(perm));
    torch::Tensor loss;
    try {
      loss = mine_loss(T, ub, gb, gm);
    } catch (const NumericalError&) {
      throw ProbeError("MINE training diverged at step " + std::to_string(step));
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
  }

  // Average of the neural information measure over a large resample.
  torch::NoGradGuard guard;
  const int chunk = 4096;
  double joint_sum = 0;
  std::vector<torch::Tensor> marg_lse;
  int drawn = 0;
  while (drawn < budget.eval_samples) {
    const int count = std::min(chunk, budget.eval_samples - drawn);
    const torch::Tensor idx = index_tensor(draw_indices(n, count, rng));
    const torch::Tensor midx = index_tensor(draw_indices(n, count, rng));
    const torch::Tensor ub = add_noise(u.index_select(0, idx), noise, rng);
    joint_sum += T->forward(ub, g.index_select(0, idx)).to(torch::kFloat64).sum().item<double>();
    marg_lse.push_back(torch::logsumexp(T->forward(ub, g.index_select(0, midx)).to(torch::kFloat64), 0));
    drawn += count;
  }
  const double log_mean_exp =
      torch::logsumexp(torch::stack(marg_lse), 0).item<double>() - std::log(static_cast<double>(drawn));
  const double raw = joint_sum / drawn - log_mean_exp;
  if (!std::isfinite(raw)) throw ProbeError("MINE estimate is non-finite");
  return {std::max(0.0, raw), raw};
}

std::vector<double> log_space(double lo, double hi, int count) {
  if (!(lo > 0) || !(hi >= lo) || count < 1) throw DomainError("log_space needs 0 < lo <= hi and count >= 1");
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double t = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
    out[static_cast<std::size_t>(i)] = std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
  }
  return out;
}

ProbeResult classifier_probe(const torch::Tensor& embeddings, const std::vector<int>& labels, const NoiseSpec& noise,
                             const ClassifierBudget& budget, std::uint64_t seed) {
  noise.validate();
  if (embeddings.dim() != 2 || embeddings.size(0) != static_cast<std::int64_t>(labels.size())) {
    throw ContractError("classifier_probe needs one label per embedding row");
  }
  std::map<int, std::int64_t> classes;
  for (int l : labels) classes.emplace(l, 0);
  if (classes.size() < 2) throw ProbeError("classifier probe needs at least two classes");
  std::int64_t next = 0;
  for (auto& [label, id] : classes) id = next++;
  const int k = static_cast<int>(classes.size());

  torch::set_num_threads(1);
  const std::int64_t n = embeddings.size(0);
  Rng rng(seed);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(budget.test_fraction * n)));
  if (n_test >= n) throw ContractError("classifier probe split leaves no training data");
  const std::vector<std::int64_t> test(order.begin(), order.begin() + n_test);
  const std::vector<std::int64_t> train(order.begin() + n_test, order.end());

  const torch::Tensor x = embeddings.to(torch::kFloat32).contiguous();
  std::vector<std::int64_t> y_ids;
  y_ids.reserve(labels.size());
  for (int l : labels) y_ids.push_back(classes.at(l));
  const torch::Tensor y = index_tensor(y_ids);

  Classifier net(static_cast<int>(x.size(1)), k, seed + 31);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(budget.lr));
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  for (int step = 0; step < budget.steps; ++step) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(budget.batch));
    for (auto& i : idx) i = train[pick(rng)];
    const torch::Tensor it = index_tensor(idx);
    const torch::Tensor xb = add_noise(x.index_select(0, it), noise, rng);
    const torch::Tensor loss = torch::nn::functional::cross_entropy(net->forward(xb), y.index_select(0, it));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }

  torch::NoGradGuard guard;
  const torch::Tensor tt = index_tensor(test);
  const torch::Tensor pred = net->forward(add_noise(x.index_select(0, tt), noise, rng)).argmax(1);
  const double correct = pred.eq(y.index_select(0, tt)).sum().item<double>();
  return {correct / static_cast<double>(n_test), 1.0 / k, k};
}

std::vector<std::size_t> retrieve_per_class(const torch::Tensor& query, const torch::Tensor& gallery,
                                            const std::vector<std::vector<std::size_t>>& classes,
                                            SimilarityMetric metric) {
  if (gallery.dim() != 2 || gallery.size(0) == 0) throw ContractError("retrieval gallery is empty");
  const torch::Tensor sims =
      pairwise_similarity(query.reshape({1, -1}).to(torch::kFloat64), gallery.to(torch::kFloat64), metric)[0]
          .contiguous();
  const auto acc = sims.accessor<double, 1>();
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (classes[c].empty()) throw ContractError("retrieval class " + std::to_string(c) + " is empty");
    std::vector<std::size_t> members = classes[c];
    std::sort(members.begin(), members.end());
    std::size_t best = members.front();
    for (std::size_t i : members) {
      if (static_cast<std::int64_t>(i) >= gallery.size(0)) throw ContractError("retrieval index out of range");
      if (acc[static_cast<std::int64_t>(i)] > acc[static_cast<std::int64_t>(best)]) best = i;
    }
    out.push_back(best);
  }
  return out;
}

Quaternion quaternion_about_z(double radians) { return {std::cos(radians / 2), 0.0, 0.0, std::sin(radians / 2)}; }

void Codebook::validate() const {
  if (!embeddings.defined() || embeddings.dim() != 2 || embeddings.size(0) == 0) {
    throw ContractError("codebook is empty");
  }
  if (embeddings.size(0) != static_cast<std::int64_t>(rotations.size())) {
    throw ContractError("codebook needs one rotation per embedding");
  }
  for (const auto& q : rotations) {
    const double norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (std::abs(norm - 1.0) > 1e-6) throw DomainError("codebook rotation is not a unit quaternion");
  }
}

std::size_t codebook_argmax(const torch::Tensor& query, const Codebook& codebook) {
  codebook.validate();
  const torch::Tensor sims = pairwise_similarity(query.reshape({1, -1}).to(torch::kFloat64),
                                                 codebook.embeddings.to(torch::kFloat64), codebook.metric)[0]
                                 .contiguous();
  const auto acc = sims.accessor<double, 1>();
  std::size_t best = 0;
  for (std::int64_t i = 1; i < sims.size(0); ++i) {
    if (acc[i] > acc[static_cast<std::int64_t>(best)]) best = static_cast<std::size_t>(i);
  }
  return best;
}

Quaternion codebook_lookup(const torch::Tensor& query, const Codebook& codebook) {
  return codebook.rotations[codebook_argmax(query, codebook)];
}

double geodesic_error(const Quaternion& q1, const Quaternion& q2) {
  double dot = 0, n1 = 0, n2 = 0;
  for (int i = 0; i < 4; ++i) {
    dot += q1[i] * q2[i];
    n1 += q1[i] * q1[i];
    n2 += q2[i] * q2[i];
  }
  if (std::abs(std::sqrt(n1) - 1.0) > 1e-6 || std::abs(std::sqrt(n2) - 1.0) > 1e-6) {
    throw DomainError("geodesic_error needs unit quaternions");
  }
  return 2.0 * std::acos(std::min(1.0, std::abs(dot))) * 180.0 / M_PI;
}

ErrorSummary summarize_errors(const std::vector<double>& errors, const std::vector<double>& thresholds) {
  if (errors.empty()) throw ContractError("summarize_errors needs at least one error");
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  ErrorSummary s;
  s.median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  s.thresholds = thresholds;
  for (double t : thresholds) {
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    s.accuracy.push_back(static_cast<double>(below) / static_cast<double>(n));
  }
  return s;
}

ErrorSummary average_summaries(const std::vector<ErrorSummary>& summaries) {
  if (summaries.empty()) throw ContractError("nothing to average");
  ErrorSummary out;
  out.thresholds = summaries.front().thresholds;
  out.accuracy.assign(out.thresholds.size(), 0.0);
  for (const auto& s : summaries) {
    if (s.thresholds != out.thresholds) throw ContractError("summaries use different thresholds");
    out.median += s.median;
    for (std::size_t i = 0; i < s.accuracy.size(); ++i) out.accuracy[i] += s.accuracy[i];
  }
  const double k = static_cast<double>(summaries.size());
  out.median /= k;
  for (double& a : out.accuracy) a /= k;
  return out;
}

CodebookProtocolResult random_codebook_protocol(const torch::Tensor& queries, const std::vector<Quaternion>& truth,
                                      const Codebook& pool, std::size_t size, int codebooks,
                                      const std::vector<double>& thresholds, std::uint64_t seed) {
  pool.validate();
  if (queries.size(0) != static_cast<std::int64_t>(truth.size())) throw ContractError("one rotation per query");
  if (size < 1 || size > pool.rotations.size()) throw ContractError("codebook size exceeds the pool");
  if (codebooks < 1) throw ContractError("need at least one codebook");
  Rng rng(seed);
  CodebookProtocolResult result;
  for (int c = 0; c < codebooks; ++c) {
    std::vector<std::int64_t> order(pool.rotations.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(size);
    Codebook book;
    book.metric = pool.metric;
    book.embeddings = pool.embeddings.index_select(0, index_tensor(order));
    for (auto i : order) book.rotations.push_back(pool.rotations[static_cast<std::size_t>(i)]);
    std::vector<double> errors;
    for (std::int64_t q = 0; q < queries.size(0); ++q) {
      errors.push_back(geodesic_error(codebook_lookup(queries[q], book), truth[static_cast<std::size_t>(q)]));
    }
    result.per_codebook.push_back(summarize_errors(errors, thresholds));
    result.entries.emplace_back(order.begin(), order.end());
  }
  result.mean = average_summaries(result.per_codebook);
  return result;
}

}  // namespace abc
