#include "abc/factor_model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "abc/errors.hpp"

namespace abc {

bool Factor::contains(double value) const {
  if (!std::isfinite(value)) return false;
  if (is_discrete()) {
    return value == std::floor(value) && value >= 0 && value < cardinality();
  }
  return value >= interval().lo && value <= interval().hi;
}

int Factor::key_count(int bins) const { return is_discrete() ? cardinality() : bins; }

int Factor::key(double value, int bins) const {
  if (is_discrete()) return static_cast<int>(value);
  const auto& iv = interval();
  const int bin = static_cast<int>(std::floor((value - iv.lo) / (iv.hi - iv.lo) * bins));
  return std::clamp(bin, 0, bins - 1);
}

FactorSpec::FactorSpec(std::vector<Factor> factors) : factors_(std::move(factors)) {
  std::set<std::string> names;
  for (const auto& f : factors_) {
    if (f.name.empty()) throw ContractError("factor name must be non-empty");
    if (!names.insert(f.name).second) throw ContractError("duplicate factor name '" + f.name + "'");
    if (f.is_discrete()) {
      if (f.cardinality() < 2) {
        throw ContractError("factor '" + f.name + "' needs cardinality >= 2");
      }
    } else if (!(f.interval().lo < f.interval().hi)) {
      throw ContractError("factor '" + f.name + "' has a degenerate interval");
    }
  }
}

std::optional<std::size_t> FactorSpec::find(const std::string& name) const {
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    if (factors_[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t FactorSpec::index_of(const std::string& name) const {
  if (auto i = find(name)) return *i;
  throw ContractError("unknown factor '" + name + "'");
}

bool FactorSpec::operator==(const FactorSpec& o) const {
  if (size() != o.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const Factor& a = factors_[i];
    const Factor& b = o.factors_[i];
    if (a.name != b.name || a.is_discrete() != b.is_discrete()) return false;
    if (a.is_discrete()) {
      if (a.cardinality() != b.cardinality()) return false;
    } else if (a.interval().lo != b.interval().lo || a.interval().hi != b.interval().hi) {
      return false;
    }
  }
  return true;
}

void validate_latent(const FactorSpec& spec, const LatentCode& code) {
  if (code.values.size() != spec.size() || code.roles.size() != spec.size()) {
    throw DomainError("latent code length " + std::to_string(code.values.size()) +
                      " does not match spec length " + std::to_string(spec.size()));
  }
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (!spec[i].contains(code.values[i])) {
      std::ostringstream msg;
      msg << "value " << code.values[i] << " outside the domain of factor '" << spec[i].name << "'";
      throw DomainError(msg.str());
    }
  }
}

LatentCode sample_latent(const FactorSpec& spec, Rng& rng, const ValueAssignment& fixed) {
  for (const auto& [name, value] : fixed) {
    const auto idx = spec.find(name);
    if (!idx) throw DomainError("fixed value for unknown factor '" + name + "'");
    if (!spec[*idx].contains(value)) {
      std::ostringstream msg;
      msg << "fixed value " << value << " outside the domain of factor '" << name << "'";
      throw DomainError(msg.str());
    }
  }
  LatentCode code;
  code.values.resize(spec.size());
  code.roles.resize(spec.size(), FactorRole::active);
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const Factor& f = spec[i];
    if (auto it = fixed.find(f.name); it != fixed.end()) {
      code.values[i] = it->second;
      code.roles[i] = FactorRole::inactive;
    } else if (f.is_discrete()) {
      code.values[i] = std::uniform_int_distribution<int>(0, f.cardinality() - 1)(rng);
    } else {
      code.values[i] = std::uniform_real_distribution<double>(f.interval().lo, f.interval().hi)(rng);
    }
  }
  return code;
}

bool matches_keys(const FactorSpec& spec, const LatentCode& code, const KeyAssignment& keys,
                  int bins) {
  for (const auto& [name, key] : keys) {
    const std::size_t i = spec.index_of(name);
    if (spec[i].key(code.values[i], bins) != key) return false;
  }
  return true;
}

std::vector<std::size_t> Dataset::matching(const KeyAssignment& keys) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (matches_keys(spec(), latent(i), keys, key_bins())) out.push_back(i);
  }
  return out;
}

// ---- GridDataset ----

GridDataset::GridDataset(std::shared_ptr<const Renderer> renderer, std::uint64_t seed,
                         std::map<std::string, int> continuous_resolution)
    : renderer_(std::move(renderer)), seed_(seed) {
  const FactorSpec& s = renderer_->spec();
  for (const auto& [name, res] : continuous_resolution) {
    const std::size_t i = s.index_of(name);
    if (s[i].is_discrete()) throw ContractError("resolution given for discrete factor '" + name + "'");
    if (res < 1) throw ContractError("resolution must be >= 1 for factor '" + name + "'");
  }
  for (const auto& f : s.factors()) levels_.push_back(f.is_discrete() ? f.cardinality() : 0);
  size_ = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s[i].is_discrete()) {
      auto it = continuous_resolution.find(s[i].name);
      levels_[i] = it == continuous_resolution.end() ? kDefaultKeyBins : it->second;
    }
    size_ *= static_cast<std::size_t>(levels_[i]);
  }
}

double GridDataset::level_value(std::size_t factor, int level) const {
  const Factor& f = spec()[factor];
  if (f.is_discrete()) return level;
  const auto& iv = f.interval();
  return iv.lo + (level + 0.5) * (iv.hi - iv.lo) / levels_[factor];
}

LatentCode GridDataset::latent(std::size_t index) const {
  if (index >= size_) throw ContractError("grid index out of range");
  const std::size_t n = levels_.size();
  LatentCode code;
  code.values.resize(n);
  code.roles.assign(n, FactorRole::active);
  for (std::size_t k = n; k-- > 0;) {
    const auto lv = static_cast<std::size_t>(levels_[k]);
    code.values[k] = level_value(k, static_cast<int>(index % lv));
    index /= lv;
  }
  return code;
}

Observation GridDataset::observation(std::size_t index) const {
  return renderer_->render(latent(index), seed_);
}

std::vector<std::size_t> GridDataset::matching(const KeyAssignment& keys) const {
  const FactorSpec& s = spec();
  const std::size_t n = s.size();
  std::vector<std::vector<int>> allowed(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto it = keys.find(s[k].name);
    for (int l = 0; l < levels_[k]; ++l) {
      if (it == keys.end() || s[k].key(level_value(k, l), key_bins()) == it->second) {
        allowed[k].push_back(l);
      }
    }
  }
  for (const auto& [name, key] : keys) s.index_of(name);

  std::size_t total = 1;
  for (const auto& a : allowed) total *= a.size();
  std::vector<std::size_t> out;
  out.reserve(total);
  std::vector<std::size_t> cursor(n, 0);
  for (std::size_t t = 0; t < total; ++t) {
    std::size_t index = 0;
    for (std::size_t k = 0; k < n; ++k) {
      index = index * static_cast<std::size_t>(levels_[k]) + static_cast<std::size_t>(allowed[k][cursor[k]]);
    }
    out.push_back(index);
    for (std::size_t k = n; k-- > 0;) {
      if (++cursor[k] < allowed[k].size()) break;
      cursor[k] = 0;
    }
  }
  return out;
}

// ---- ListDataset ----

ListDataset::ListDataset(FactorSpec spec, std::vector<Observation> items)
    : spec_(std::move(spec)), items_(std::move(items)) {
  keys_.reserve(items_.size());
  for (const auto& obs : items_) {
    if (!obs.source_latent) throw ContractError("list dataset items need a source latent code");
    validate_latent(spec_, *obs.source_latent);
    std::vector<int> k(spec_.size());
    for (std::size_t f = 0; f < spec_.size(); ++f) k[f] = spec_[f].key(obs.source_latent->values[f]);
    keys_.push_back(std::move(k));
  }
}

std::vector<std::size_t> ListDataset::matching(const KeyAssignment& keys) const {
  std::vector<std::pair<std::size_t, int>> wanted;
  for (const auto& [name, key] : keys) wanted.emplace_back(spec_.index_of(name), key);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    bool ok = true;
    for (const auto& [f, key] : wanted) ok = ok && keys_[i][f] == key;
    if (ok) out.push_back(i);
  }
  return out;
}

std::map<int, std::vector<std::size_t>> ListDataset::groups(const std::string& factor) const {
  const std::size_t f = spec_.index_of(factor);
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < items_.size(); ++i) out[keys_[i][f]].push_back(i);
  return out;
}

// ---- SubsetDataset ----

SubsetDataset::SubsetDataset(std::shared_ptr<const Dataset> base, std::vector<std::size_t> indices)
    : base_(std::move(base)), indices_(std::move(indices)) {
  std::sort(indices_.begin(), indices_.end());
  indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
  if (!indices_.empty() && indices_.back() >= base_->size()) throw ContractError("subset index out of range");
}

std::shared_ptr<SubsetDataset> SubsetDataset::excluding(std::shared_ptr<const Dataset> base,
                                                        const std::string& factor,
                                                        const std::vector<int>& excluded) {
  const std::size_t f = base->spec().index_of(factor);
  const Factor& fac = base->spec()[f];
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < base->size(); ++i) {
    const int key = fac.key(base->latent(i).values[f], base->key_bins());
    if (std::find(excluded.begin(), excluded.end(), key) == excluded.end()) keep.push_back(i);
  }
  return std::make_shared<SubsetDataset>(std::move(base), std::move(keep));
}

std::vector<std::size_t> SubsetDataset::matching(const KeyAssignment& keys) const {
  std::vector<std::size_t> out;
  for (std::size_t b : base_->matching(keys)) {
    auto it = std::lower_bound(indices_.begin(), indices_.end(), b);
    if (it != indices_.end() && *it == b) out.push_back(static_cast<std::size_t>(it - indices_.begin()));
  }
  return out;
}

}  // namespace abc
