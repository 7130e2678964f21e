#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "abc/factor_model.hpp"

namespace abc {

// Linear ramp of the extraneous-domain fraction in the unconstrained set,
// advancing in whole `step_interval` increments.
struct TitrationSchedule {
  double final_fraction = 0.0;
  std::int64_t ramp_steps = 0;
  std::int64_t step_interval = 1;

  void validate() const;
  double fraction(std::int64_t step) const;
  // round-half-to-even(fraction(step) * set_size)
  std::size_t extraneous_count(std::int64_t step, std::size_t set_size) const;
};

struct CuratedSet {
  std::vector<Observation> elements;
  std::vector<std::size_t> indices;  // dataset indices, aligned with elements
  bool with_replacement = false;     // pool smaller than the requested size
};

// A pair of sets for one training step. An unset inactive assignment means
// the set was drawn unconstrained.
struct SetBatch {
  std::vector<Observation> set_a;
  std::vector<Observation> set_b;
  std::optional<KeyAssignment> inactive_a;
  std::optional<KeyAssignment> inactive_b;
  std::vector<std::string> provenance_b;
  bool replacement_a = false;
  bool replacement_b = false;
  std::size_t extraneous_count = 0;
};

std::string describe(const KeyAssignment& keys);

// Keys of `factor` that have at least one member in `dataset`.
std::vector<int> present_keys(const Dataset& dataset, const std::string& factor);

// Uniform draw over present keys of each named factor; retried until the
// joint assignment has members.
KeyAssignment sample_assignment(const Dataset& dataset, const std::vector<std::string>& inactive_factors,
                                Rng& rng);

CuratedSet curate_set(const Dataset& dataset, const KeyAssignment& inactive, std::size_t size, Rng& rng);

SetBatch sample_pair(const Dataset& dataset, const std::vector<std::string>& inactive_factors,
                     std::size_t size, Rng& rng);

// ABC-X pair: set A curated, set B unconstrained with a titrated share of
// elements drawn from `extraneous` (may be null when the fraction is zero).
SetBatch sample_pair_x(const Dataset& curated, const Dataset* extraneous,
                       const std::vector<std::string>& inactive_factors, std::size_t size,
                       const TitrationSchedule& schedule, std::int64_t step, Rng& rng);

}  // namespace abc
