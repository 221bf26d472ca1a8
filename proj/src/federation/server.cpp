// SPDX-License-Identifier: Apache-2.0
#include "fmoe/federation/server.hpp"

#include "fmoe/errors.hpp"

namespace fmoe::federation {

void ServerCache::upload(const std::string& domain, ExpertCheckpoint checkpoint) {
  if (observer_) observer_(domain, checkpoint);
  staged_.emplace_back(domain, std::move(checkpoint));
}

void ServerCache::commit() {
  CacheSnapshot next = entries_;
  for (auto& [domain, checkpoint] : staged_) next[domain] = std::move(checkpoint);
  entries_ = std::move(next);
  staged_.clear();
  ++round_;
}

void ServerCache::commit_average() {
  std::vector<ExpertCheckpoint> inputs;
  inputs.reserve(staged_.size());
  for (const auto& [domain, checkpoint] : staged_) inputs.push_back(checkpoint);
  const auto average = fedavg_aggregate(inputs);
  CacheSnapshot next = entries_;
  for (const auto& [domain, checkpoint] : staged_) next[domain] = average;
  entries_ = std::move(next);
  staged_.clear();
  ++round_;
}

const ExpertCheckpoint& ServerCache::at(const std::string& domain) const {
  auto it = entries_.find(domain);
  if (it == entries_.end()) throw ContractError("server cache has no checkpoint for " + domain);
  return it->second;
}

}  // namespace fmoe::federation
