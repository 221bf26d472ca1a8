// SPDX-License-Identifier: Apache-2.0
#include "fmoe/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "fmoe/errors.hpp"

namespace fmoe::data {

RawDomain parse_domain(std::istream& in, std::string domain_id) {
  RawDomain domain{std::move(domain_id), {}};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("missing tab after user id", line_no);
    UserSequence user;
    user.user_id = line.substr(0, tab);
    if (user.user_id.empty()) throw ParseError("empty user id", line_no);
    std::istringstream items(line.substr(tab + 1));
    std::string token;
    while (items >> token) user.items.push_back(token);
    if (user.items.empty()) throw ParseError("user has no items", line_no);
    domain.users.push_back(std::move(user));
  }
  return domain;
}

RawDomain read_domain(const std::filesystem::path& path, std::string domain_id) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open domain file " + path.string());
  return parse_domain(in, std::move(domain_id));
}

void write_domain(std::ostream& out, const RawDomain& domain) {
  for (const auto& user : domain.users) {
    out << user.user_id << '\t';
    for (std::size_t i = 0; i < user.items.size(); ++i) {
      if (i) out << ' ';
      out << user.items[i];
    }
    out << '\n';
  }
}

RawDomain filter_interactions(RawDomain domain, const FilterConfig& config) {
  if (!config.enabled) return domain;
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& u : domain.users) {
      for (const auto& it : u.items) ++counts[it];
    }
    for (auto& u : domain.users) {
      const auto before = u.items.size();
      std::erase_if(u.items, [&](const std::string& it) {
        return counts[it] < config.min_item_interactions;
      });
      changed = changed || u.items.size() != before;
    }
    const auto before = domain.users.size();
    std::erase_if(domain.users, [&](const UserSequence& u) {
      const auto n = u.items.size();
      return n < config.min_user_interactions || n < config.min_length ||
             n > config.max_length;
    });
    changed = changed || domain.users.size() != before;
  }
  return domain;
}

std::size_t holdout_count(std::size_t length, double ratio) {
  if (length < 2) return 0;
  const auto rounded = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(length)));
  return std::min(std::max<std::size_t>(2, rounded), length - 1);
}

std::vector<ItemId> pad_prefix(std::span<const ItemId> items, std::size_t max_prefix) {
  std::vector<ItemId> out(max_prefix, kPadding);
  const std::size_t n = std::min(items.size(), max_prefix);
  std::copy(items.end() - static_cast<std::ptrdiff_t>(n), items.end(),
            out.end() - static_cast<std::ptrdiff_t>(n));
  return out;
}

SplitResult split_dataset(
    std::span<const std::pair<std::string, std::vector<ItemId>>> sequences, double ratio,
    std::size_t max_prefix) {
  SplitResult out;
  for (const auto& [user, items] : sequences) {
    const std::size_t n = items.size();
    const std::size_t held = holdout_count(n, ratio);
    const std::size_t train_len = n - held;
    std::span<const ItemId> all(items);
    for (std::size_t t = 1; t < train_len; ++t) {
      out.train.push_back({user, pad_prefix(all.first(t), max_prefix), items[t]});
    }
    // Earlier half to valid, later half (and any odd one out) to test.
    const std::size_t to_valid = held / 2;
    for (std::size_t j = 0; j < held; ++j) {
      const std::size_t pos = train_len + j;
      SequenceSample s{user, pad_prefix(all.first(pos), max_prefix), items[pos]};
      (j < to_valid ? out.valid : out.test).push_back(std::move(s));
    }
    out.train_sequences.emplace_back(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(train_len));
  }
  return out;
}

SparseMatrix build_adjacency(std::span<const std::vector<ItemId>> train_sequences,
                             std::size_t num_items) {
  std::vector<std::vector<std::uint32_t>> succ(num_items + 1);
  for (std::size_t i = 1; i <= num_items; ++i) succ[i].push_back(static_cast<std::uint32_t>(i));
  for (const auto& seq : train_sequences) {
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      if (seq[t] == kPadding || seq[t] > num_items || seq[t + 1] > num_items) {
        throw IndexError("build_adjacency: item id outside vocabulary");
      }
      succ[seq[t]].push_back(seq[t + 1]);
    }
  }
  SparseMatrix a;
  a.rows = a.cols = num_items + 1;
  a.row_ptr.assign(num_items + 2, 0);
  for (std::size_t r = 0; r <= num_items; ++r) {
    auto& s = succ[r];
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    for (auto c : s) {
      a.col_idx.push_back(c);
      a.values.push_back(1.0 / static_cast<double>(s.size()));
    }
    a.row_ptr[r + 1] = a.col_idx.size();
  }
  return a;
}

DomainDataset build_domain(const RawDomain& raw, const DataConfig& config) {
  DomainDataset ds;
  ds.domain_id = raw.domain_id;
  std::unordered_map<std::string, ItemId> ids;
  std::vector<std::pair<std::string, std::vector<ItemId>>> sequences;
  sequences.reserve(raw.users.size());
  for (const auto& u : raw.users) {
    std::vector<ItemId> seq;
    seq.reserve(u.items.size());
    for (const auto& tok : u.items) {
      auto [it, inserted] = ids.try_emplace(tok, static_cast<ItemId>(ds.item_tokens.size() + 1));
      if (inserted) ds.item_tokens.push_back(tok);
      seq.push_back(it->second);
    }
    ds.num_interactions += seq.size();
    sequences.emplace_back(u.user_id, std::move(seq));
  }
  ds.num_items = ds.item_tokens.size();
  ds.num_users = sequences.size();
  auto split = split_dataset(sequences, config.holdout_ratio, config.max_prefix);
  ds.train = std::move(split.train);
  ds.valid = std::move(split.valid);
  ds.test = std::move(split.test);
  ds.train_sequences = std::move(split.train_sequences);
  ds.adjacency = build_adjacency(ds.train_sequences, ds.num_items);
  return ds;
}

DomainDataset load_domain(const std::filesystem::path& path, std::string domain_id,
                          const DataConfig& config) {
  auto raw = filter_interactions(read_domain(path, std::move(domain_id)), config.filter);
  if (raw.users.empty()) {
    throw EmptyDatasetError("domain '" + raw.domain_id + "' is empty after filtering (" +
                            path.string() + ")");
  }
  return build_domain(raw, config);
}

std::vector<ItemId> augment(std::span<const ItemId> prefix, double ratio, Rng& rng) {
  std::vector<ItemId> out(prefix.begin(), prefix.end());
  std::size_t first = 0;
  while (first < out.size() && out[first] == kPadding) ++first;
  const std::size_t len = out.size() - first;
  const auto window = std::min<std::size_t>(
      len, static_cast<std::size_t>(std::lround(ratio * static_cast<double>(len))));
  if (window < 2) return out;
  const std::size_t start = first + static_cast<std::size_t>(rng.below(len - window + 1));
  rng.shuffle(out.begin() + static_cast<std::ptrdiff_t>(start),
              out.begin() + static_cast<std::ptrdiff_t>(start + window));
  return out;
}

std::size_t ScenarioSpec::index_of(const std::string& domain_id) const {
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].domain_id == domain_id) return i;
  }
  throw ConfigError("unknown domain '" + domain_id + "'");
}

void validate_scenario(const ScenarioSpec& scenario) {
  if (scenario.domains.size() < 2) {
    throw ConfigError("a scenario needs at least two domains");
  }
  std::unordered_set<std::string> names;
  std::unordered_map<std::string, std::string> owner;
  for (const auto& d : scenario.domains) {
    if (!names.insert(d.domain_id).second) {
      throw ConfigError("duplicate domain id '" + d.domain_id + "'");
    }
    for (const auto& tok : d.item_tokens) {
      auto [it, inserted] = owner.try_emplace(tok, d.domain_id);
      if (!inserted) {
        throw ConfigError("item '" + tok + "' appears in domains '" + it->second +
                          "' and '" + d.domain_id + "'; vocabularies must be disjoint");
      }
    }
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
      throw ParseError("manifest lines are 'domain_id<TAB>path'", line_no);
    }
    std::filesystem::path file = line.substr(tab + 1);
    if (file.is_relative()) file = path.parent_path() / file;
    entries.push_back({line.substr(0, tab), file});
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& e : entries) out << e.domain_id << '\t' << e.path.string() << '\n';
}

ScenarioSpec load_scenario(const std::filesystem::path& manifest, const DataConfig& config,
                           std::uint64_t seed) {
  ScenarioSpec scenario;
  scenario.seed = seed;
  for (const auto& e : read_manifest(manifest)) {
    scenario.domains.push_back(load_domain(e.path, e.domain_id, config));
  }
  validate_scenario(scenario);
  return scenario;
}

}  // namespace fmoe::data
