#include "abc/set_curation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "abc/errors.hpp"

namespace abc {
namespace {

constexpr int kAssignmentRetries = 256;

std::vector<Observation> materialize(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  std::vector<Observation> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(dataset.observation(i));
  return out;
}

}  // namespace

void TitrationSchedule::validate() const {
  if (!(final_fraction >= 0.0 && final_fraction <= 1.0)) {
    throw ConfigError("titration final_fraction must lie in [0, 1]");
  }
  if (ramp_steps < 0) throw ConfigError("titration ramp_steps must be >= 0");
  if (step_interval < 1) throw ConfigError("titration step_interval must be >= 1");
}

double TitrationSchedule::fraction(std::int64_t step) const {
  if (step < 0) step = 0;
  if (ramp_steps <= 0) return final_fraction;
  const std::int64_t stepped = (step / step_interval) * step_interval;
  return final_fraction * std::min(1.0, static_cast<double>(stepped) / static_cast<double>(ramp_steps));
}

std::size_t TitrationSchedule::extraneous_count(std::int64_t step, std::size_t set_size) const {
  // nearbyint honours the default round-to-nearest-even mode
  const double raw = std::nearbyint(fraction(step) * static_cast<double>(set_size));
  return std::min(set_size, static_cast<std::size_t>(std::max(0.0, raw)));
}

std::string describe(const KeyAssignment& keys) {
  if (keys.empty()) return "{unconstrained}";
  std::ostringstream out;
  out << '{';
  bool first = true;
  for (const auto& [name, key] : keys) {
    out << (first ? "" : ", ") << name << '=' << key;
    first = false;
  }
  out << '}';
  return out.str();
}

std::vector<int> present_keys(const Dataset& dataset, const std::string& factor) {
  const std::size_t f = dataset.spec().index_of(factor);
  const Factor& fac = dataset.spec()[f];
  if (const auto* grid = dynamic_cast<const GridDataset*>(&dataset)) {
    std::set<int> keys;
    for (int l = 0; l < grid->levels(f); ++l) keys.insert(fac.key(grid->level_value(f, l), dataset.key_bins()));
    return {keys.begin(), keys.end()};
  }
  if (const auto* list = dynamic_cast<const ListDataset*>(&dataset)) {
    std::vector<int> keys;
    for (const auto& [key, members] : list->groups(factor)) keys.push_back(key);
    return keys;
  }
  std::set<int> keys;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    keys.insert(fac.key(dataset.latent(i).values[f], dataset.key_bins()));
  }
  return {keys.begin(), keys.end()};
}

KeyAssignment sample_assignment(const Dataset& dataset, const std::vector<std::string>& inactive_factors,
                                Rng& rng) {
  std::vector<std::vector<int>> candidates;
  for (const auto& name : inactive_factors) {
    candidates.push_back(present_keys(dataset, name));
    if (candidates.back().empty()) throw CurationError("factor '" + name + "' has no members");
  }
  KeyAssignment keys;
  for (int attempt = 0; attempt < kAssignmentRetries; ++attempt) {
    keys.clear();
    for (std::size_t k = 0; k < inactive_factors.size(); ++k) {
      const auto& c = candidates[k];
      keys[inactive_factors[k]] = c[std::uniform_int_distribution<std::size_t>(0, c.size() - 1)(rng)];
    }
    // Single-factor draws over present keys always have members.
    if (inactive_factors.size() <= 1 || !dataset.matching(keys).empty()) return keys;
  }
  throw CurationError("no populated assignment found; last tried " + describe(keys));
}

CuratedSet curate_set(const Dataset& dataset, const KeyAssignment& inactive, std::size_t size, Rng& rng) {
  std::vector<std::size_t> pool = dataset.matching(inactive);
  if (pool.empty()) throw CurationError("no elements match assignment " + describe(inactive));
  CuratedSet out;
  if (pool.size() >= size) {
    for (std::size_t i = 0; i < size; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, pool.size() - 1)(rng);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(size);
    out.indices = std::move(pool);
  } else {
    out.with_replacement = true;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < size; ++i) out.indices.push_back(pool[pick(rng)]);
  }
  out.elements = materialize(dataset, out.indices);
  return out;
}

SetBatch sample_pair(const Dataset& dataset, const std::vector<std::string>& inactive_factors,
                     std::size_t size, Rng& rng) {
  if (size < 2) throw ContractError("set size must be at least 2");
  SetBatch batch;
  const KeyAssignment a = sample_assignment(dataset, inactive_factors, rng);
  const KeyAssignment b = sample_assignment(dataset, inactive_factors, rng);
  CuratedSet set_a = curate_set(dataset, a, size, rng);
  CuratedSet set_b = curate_set(dataset, b, size, rng);
  batch.set_a = std::move(set_a.elements);
  batch.set_b = std::move(set_b.elements);
  batch.replacement_a = set_a.with_replacement;
  batch.replacement_b = set_b.with_replacement;
  batch.inactive_a = a;
  batch.inactive_b = b;
  for (const auto& obs : batch.set_b) batch.provenance_b.push_back(obs.domain_tag);
  return batch;
}

SetBatch sample_pair_x(const Dataset& curated, const Dataset* extraneous,
                       const std::vector<std::string>& inactive_factors, std::size_t size,
                       const TitrationSchedule& schedule, std::int64_t step, Rng& rng) {
  if (size < 2) throw ContractError("set size must be at least 2");
  schedule.validate();
  const std::size_t n_extra = schedule.extraneous_count(step, size);
  if (n_extra > 0 && (extraneous == nullptr || extraneous->size() == 0)) {
    throw CurationError("extraneous dataset required at step " + std::to_string(step) + " but empty");
  }

  SetBatch batch;
  const KeyAssignment a = sample_assignment(curated, inactive_factors, rng);
  CuratedSet set_a = curate_set(curated, a, size, rng);
  batch.set_a = std::move(set_a.elements);
  batch.replacement_a = set_a.with_replacement;
  batch.inactive_a = a;

  CuratedSet in_domain = curate_set(curated, {}, size - n_extra, rng);
  batch.set_b = std::move(in_domain.elements);
  batch.replacement_b = in_domain.with_replacement;
  if (n_extra > 0) {
    CuratedSet extra = curate_set(*extraneous, {}, n_extra, rng);
    batch.replacement_b = batch.replacement_b || extra.with_replacement;
    for (auto& obs : extra.elements) batch.set_b.push_back(std::move(obs));
  }
  std::shuffle(batch.set_b.begin(), batch.set_b.end(), rng);
  batch.extraneous_count = n_extra;
  for (const auto& obs : batch.set_b) batch.provenance_b.push_back(obs.domain_tag);
  return batch;
}

}  // namespace abc
