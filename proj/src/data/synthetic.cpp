// SPDX-License-Identifier: Apache-2.0
#include "fmoe/data/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "fmoe/errors.hpp"

namespace fmoe::data {
namespace {

using Matrix = std::vector<std::vector<double>>;

Matrix random_chain(std::size_t clusters, std::size_t successors, Rng& rng) {
  Matrix m(clusters, std::vector<double>(clusters, 0.1 / static_cast<double>(clusters)));
  std::vector<std::size_t> order(clusters);
  for (std::size_t c = 0; c < clusters; ++c) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    std::vector<double> w(successors);
    for (auto& x : w) x = rng.uniform(0.5, 1.0);
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t s = 0; s < successors; ++s) m[c][order[s]] += 0.9 * w[s] / total;
  }
  return m;
}

std::size_t sample(const std::vector<double>& weights, Rng& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return i;
  }
  return weights.size() - 1;
}

}  // namespace

void validate(const SyntheticSpec& spec) {
  if (spec.domains < 2) throw ConfigError("synthetic spec needs at least two domains");
  if (spec.clusters < 2) throw ConfigError("synthetic spec needs at least two clusters");
  if (spec.items_per_domain < spec.clusters) {
    throw ConfigError("items_per_domain must be at least the number of clusters");
  }
  if (spec.users_per_domain == 0) throw ConfigError("users_per_domain must be positive");
  if (spec.min_length < 2 || spec.min_length > spec.max_length) {
    throw ConfigError("sequence lengths must satisfy 2 <= min_length <= max_length");
  }
  if (spec.successors == 0 || spec.successors > spec.clusters) {
    throw ConfigError("successors must be in [1, clusters]");
  }
  if (!(spec.correlation >= 0.0 && spec.correlation <= 1.0)) {
    throw ConfigError("correlation must be in [0, 1]");
  }
}

std::vector<RawDomain> generate_synthetic_raw(const SyntheticSpec& spec) {
  validate(spec);
  const std::size_t C = spec.clusters;
  Rng shared_rng(derive_seed(spec.seed, "synthetic-shared-chain"));
  const Matrix shared = random_chain(C, spec.successors, shared_rng);

  std::vector<RawDomain> out;
  for (std::size_t d = 0; d < spec.domains; ++d) {
    Rng rng(derive_seed(spec.seed, "synthetic-domain", d));
    const Matrix own = random_chain(C, spec.successors, rng);
    Matrix chain(C, std::vector<double>(C));
    for (std::size_t a = 0; a < C; ++a) {
      for (std::size_t b = 0; b < C; ++b) {
        chain[a][b] = spec.correlation * shared[a][b] + (1.0 - spec.correlation) * own[a][b];
      }
    }
    std::vector<std::size_t> perm(spec.items_per_domain);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<std::vector<std::size_t>> members(C);
    std::vector<std::size_t> cluster_of(spec.items_per_domain);
    for (std::size_t j = 0; j < perm.size(); ++j) {
      members[j % C].push_back(perm[j]);
      cluster_of[perm[j]] = j % C;
    }
    std::vector<std::vector<double>> emission(C);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t r = 0; r < members[c].size(); ++r) {
        emission[c].push_back(1.0 / std::pow(static_cast<double>(r + 1), spec.emission_skew));
      }
    }

    const std::string prefix = "d" + std::to_string(d);
    std::vector<std::vector<std::size_t>> sequences(spec.users_per_domain);
    std::vector<std::size_t> counts(spec.items_per_domain, 0);
    for (auto& seq : sequences) {
      const std::size_t len =
          spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
      std::size_t cluster = rng.below(C);
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t item = members[cluster][sample(emission[cluster], rng)];
        seq.push_back(item);
        ++counts[item];
        cluster = sample(chain[cluster], rng);
      }
    }
    // Guarantee full vocabulary coverage by re-labelling one interaction of
    // a repeated same-cluster item per unseen item.
    for (std::size_t item = 0; item < spec.items_per_domain; ++item) {
      if (counts[item] > 0) continue;
      bool done = false;
      for (int pass = 0; pass < 2 && !done; ++pass) {
        for (auto& seq : sequences) {
          for (auto& x : seq) {
            const bool cluster_ok = pass == 1 || cluster_of[x] == cluster_of[item];
            if (cluster_ok && counts[x] >= 2) {
              --counts[x];
              x = item;
              ++counts[item];
              done = true;
              break;
            }
          }
          if (done) break;
        }
      }
    }

    RawDomain domain{prefix, {}};
    for (std::size_t u = 0; u < sequences.size(); ++u) {
      UserSequence user{prefix + "_u" + std::to_string(u), {}};
      for (auto item : sequences[u]) user.items.push_back(prefix + "_i" + std::to_string(item));
      domain.users.push_back(std::move(user));
    }
    out.push_back(std::move(domain));
  }
  return out;
}

ScenarioSpec generate_synthetic(const SyntheticSpec& spec, DataConfig config) {
  config.filter.enabled = false;
  ScenarioSpec scenario;
  scenario.seed = spec.seed;
  for (const auto& raw : generate_synthetic_raw(spec)) {
    scenario.domains.push_back(build_domain(raw, config));
  }
  validate_scenario(scenario);
  return scenario;
}

std::filesystem::path write_scenario(std::span<const RawDomain> domains,
                                     const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  std::vector<ManifestEntry> entries;
  for (const auto& d : domains) {
    const std::string file = d.domain_id + ".txt";
    std::ofstream out(directory / file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (directory / file).string());
    write_domain(out, d);
    entries.push_back({d.domain_id, file});
  }
  const auto manifest = directory / "scenario.manifest";
  write_manifest(manifest, entries);
  return manifest;
}

}  // namespace fmoe::data
