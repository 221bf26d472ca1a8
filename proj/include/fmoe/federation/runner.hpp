// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fmoe/data/dataset.hpp"
#include "fmoe/eval/metrics.hpp"
#include "fmoe/federation/client.hpp"
#include "fmoe/federation/server.hpp"

namespace fmoe::federation {

struct RoundRecord {
  std::size_t round = 0;
  eval::MetricsReport valid;
  eval::MetricsReport test;
  // Per domain, mean gate weight per expert over the validation samples.
  std::vector<std::vector<double>> gate_weights;
  // Per domain, mean of each logged loss component over the round.
  std::vector<std::vector<LossComponent>> train_losses;
  // Fingerprint of every cache entry after the round barrier, by domain.
  std::vector<std::uint64_t> cache_fingerprints;
};

struct RunResult {
  std::string mode;
  std::vector<RoundRecord> history;
  std::size_t best_index = 0;
  bool early_stopped = false;

  const RoundRecord& best() const { return history.at(best_index); }
};

using RoundCallback = std::function<void(const RoundRecord&)>;

// Domains each client adapts under the configured mode, in scenario order.
std::vector<std::vector<std::string>> resolve_sources(const data::ScenarioSpec& scenario,
                                                      const TrainConfig& config);

template <typename T>
class Federation {
 public:
  // Validates everything, builds the clients and seeds the cache from each
  // client's initial encoder. The scenario must outlive the federation.
  Federation(const data::ScenarioSpec& scenario, const expert::EncoderConfig& encoder,
             const TrainConfig& config);

  const TrainConfig& config() const noexcept { return config_; }
  ServerCache& cache() noexcept { return cache_; }
  std::vector<ClientState<T>>& clients() noexcept { return clients_; }

  // One round: every client updates from the same snapshot (in `order`,
  // default scenario order), then uploads are committed in domain order.
  void run_round(std::size_t round, std::span<const std::size_t> order = {});

  RoundRecord evaluate(std::size_t round) const;

  // Rounds until the configured count or early stop on average valid MRR.
  RunResult run(const RoundCallback& on_round = {});

  // Independent local training for `pretrain_epochs`, one sync, then rounds
  // with the global encoders frozen and no further sync.
  RunResult run_two_phase(std::size_t pretrain_epochs, const RoundCallback& on_round = {});

  // Client parameter states at the best round seen by the last run.
  const std::vector<ExpertCheckpoint>& best_states() const noexcept { return best_states_; }

 private:
  RunResult drive(std::string label, const std::function<void(std::size_t)>& step,
                  const RoundCallback& on_round);

  const data::ScenarioSpec* scenario_;
  TrainConfig config_;
  ServerCache cache_;
  std::vector<ClientState<T>> clients_;
  std::vector<std::vector<BatchLog>> round_logs_;  // per client, last round
  std::vector<ExpertCheckpoint> best_states_;
};

// Convenience wrappers over Federation.
template <typename T>
RunResult run_federation(const data::ScenarioSpec& scenario, const expert::EncoderConfig& encoder,
                         const TrainConfig& config);

template <typename T>
RunResult run_two_phase(const data::ScenarioSpec& scenario, const expert::EncoderConfig& encoder,
                        const TrainConfig& config, std::size_t pretrain_epochs);

}  // namespace fmoe::federation
