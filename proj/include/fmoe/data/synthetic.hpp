// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "fmoe/data/dataset.hpp"

namespace fmoe::data {

// Cross-domain generator. Every domain walks a Markov chain over `clusters`
// latent clusters and emits an item of the current cluster. A domain's chain
// is `correlation * shared + (1 - correlation) * own`, so correlation 1 gives
// all domains the same latent dynamics and 0 makes them independent.
struct SyntheticSpec {
  std::size_t domains = 3;
  std::size_t items_per_domain = 200;
  std::size_t users_per_domain = 500;
  std::size_t min_length = 4;
  std::size_t max_length = 16;
  std::size_t clusters = 20;
  std::size_t successors = 2;  // preferred next clusters per cluster
  double correlation = 0.9;
  double emission_skew = 1.0;  // Zipf exponent inside a cluster
  std::uint64_t seed = 0;
};

void validate(const SyntheticSpec& spec);

// Each domain uses every one of its items at least once.
std::vector<RawDomain> generate_synthetic_raw(const SyntheticSpec& spec);

// Builds in memory; filtering is disabled so counts equal the spec.
ScenarioSpec generate_synthetic(const SyntheticSpec& spec, DataConfig config = {});

// Writes one canonical file per domain plus `scenario.manifest`; returns the
// manifest path.
std::filesystem::path write_scenario(std::span<const RawDomain> domains,
                                     const std::filesystem::path& directory);

}  // namespace fmoe::data
