// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmoe/numerics/sparse.hpp"
#include "fmoe/random.hpp"

namespace fmoe::data {

// Dense per-domain item id; 0 is padding, real items are 1..num_items.
using ItemId = std::uint32_t;
inline constexpr ItemId kPadding = 0;

// One user's time-ordered interactions with raw item tokens.
struct UserSequence {
  std::string user_id;
  std::vector<std::string> items;
};

struct RawDomain {
  std::string domain_id;
  std::vector<UserSequence> users;
};

struct SequenceSample {
  std::string user_id;
  std::vector<ItemId> prefix;  // left-padded with kPadding to max_prefix
  ItemId target = kPadding;
};

struct FilterConfig {
  bool enabled = true;
  std::size_t min_user_interactions = 10;
  std::size_t min_item_interactions = 10;
  std::size_t min_length = 4;
  std::size_t max_length = 16;
};

struct DataConfig {
  FilterConfig filter;
  double holdout_ratio = 0.2;
  std::size_t max_prefix = 16;
};

struct SplitResult {
  std::vector<SequenceSample> train;
  std::vector<SequenceSample> valid;
  std::vector<SequenceSample> test;
  // Per-user training portion, the only input to the transition graph.
  std::vector<std::vector<ItemId>> train_sequences;
};

struct DomainDataset {
  std::string domain_id;
  std::size_t num_items = 0;
  std::size_t num_users = 0;
  std::size_t num_interactions = 0;
  std::vector<std::string> item_tokens;  // item_tokens[id - 1]
  std::vector<SequenceSample> train;
  std::vector<SequenceSample> valid;
  std::vector<SequenceSample> test;
  std::vector<std::vector<ItemId>> train_sequences;
  SparseMatrix adjacency;  // (num_items + 1)^2, row/col 0 empty

  double average_length() const {
    return num_users == 0 ? 0.0
                          : static_cast<double>(num_interactions) / static_cast<double>(num_users);
  }
};

// Parses `user_id<TAB>item item ...` lines. Blank lines are skipped.
RawDomain parse_domain(std::istream& in, std::string domain_id);
RawDomain read_domain(const std::filesystem::path& path, std::string domain_id);
void write_domain(std::ostream& out, const RawDomain& domain);

// Repeats item and user pruning plus the length window until nothing changes.
RawDomain filter_interactions(RawDomain domain, const FilterConfig& config);

// Number of trailing interactions withheld for evaluation.
std::size_t holdout_count(std::size_t length, double ratio);

// Withholds the latest interactions of each user (earlier half to valid,
// later half to test) and emits one training sample per remaining position.
SplitResult split_dataset(
    std::span<const std::pair<std::string, std::vector<ItemId>>> sequences,
    double ratio, std::size_t max_prefix);

// Row-normalised transition graph with self-loops on every real item.
SparseMatrix build_adjacency(std::span<const std::vector<ItemId>> train_sequences,
                             std::size_t num_items);

// Remaps tokens to dense ids in order of first appearance, then splits.
DomainDataset build_domain(const RawDomain& raw, const DataConfig& config);

DomainDataset load_domain(const std::filesystem::path& path, std::string domain_id,
                          const DataConfig& config);

// Shuffles a contiguous window covering `ratio` of the non-padding prefix.
std::vector<ItemId> augment(std::span<const ItemId> prefix, double ratio, Rng& rng);

// Left-pads / truncates to the last `max_prefix` items.
std::vector<ItemId> pad_prefix(std::span<const ItemId> items, std::size_t max_prefix);

struct ScenarioSpec {
  std::vector<DomainDataset> domains;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return domains.size(); }
  std::size_t index_of(const std::string& domain_id) const;
};

// Throws ConfigError for fewer than two domains, duplicate ids or shared
// item tokens.
void validate_scenario(const ScenarioSpec& scenario);

struct ManifestEntry {
  std::string domain_id;
  std::filesystem::path path;
};

// `domain_id<TAB>path` per line; relative paths resolve against the
// manifest's directory. `#` starts a comment.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries);

ScenarioSpec load_scenario(const std::filesystem::path& manifest, const DataConfig& config,
                           std::uint64_t seed);

}  // namespace fmoe::data
