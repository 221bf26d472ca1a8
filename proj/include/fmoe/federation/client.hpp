// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fmoe/data/dataset.hpp"
#include "fmoe/expert/expert.hpp"
#include "fmoe/federation/checkpoint.hpp"
#include "fmoe/federation/config.hpp"
#include "fmoe/federation/server.hpp"
#include "fmoe/moe/gate.hpp"
#include "fmoe/numerics/adam.hpp"

namespace fmoe::federation {

// Another domain's encoder paired with adapters over this domain's items.
template <typename T>
struct GlobalBranch {
  std::string source;
  expert::BranchParams<T> params;
};

struct LossComponent {
  std::string name;
  double value = 0.0;
};

struct BatchLog {
  double total = 0.0;
  std::vector<LossComponent> components;
};

// kLocal trains only the local branch; kFull adds every global branch and
// the fused loss.
enum class Objective { kLocal, kFull };

template <typename T>
struct LossGraph {
  Var<T> total;
  std::vector<std::pair<std::string, Var<T>>> components;
  std::vector<Var<T>> distributions;  // local first
  Var<T> gate_weights;                // invalid for kLocal
  Var<T> mixture;                     // invalid for kLocal
};

struct EvalOutput {
  std::vector<std::size_t> ranks;
  std::vector<double> mean_gate;  // per expert, local first; empty without a gate
};

template <typename T>
class ClientState {
 public:
  // `sources` lists the domains whose encoders this client adapts, in
  // scenario order.
  ClientState(const data::DomainDataset& data, std::vector<std::string> sources,
              const expert::EncoderConfig& encoder, const TrainConfig& config);

  const std::string& domain_id() const noexcept { return data_->domain_id; }
  const data::DomainDataset& data() const noexcept { return *data_; }
  const expert::EncoderConfig& encoder_config() const noexcept { return encoder_; }
  const TrainConfig& config() const noexcept { return config_; }

  expert::BranchParams<T>& local() noexcept { return local_; }
  const expert::BranchParams<T>& local() const noexcept { return local_; }
  std::vector<GlobalBranch<T>>& globals() noexcept { return globals_; }
  const std::vector<GlobalBranch<T>>& globals() const noexcept { return globals_; }
  moe::GateParams<T>& gate() noexcept { return gate_; }
  Adam<T>& optimizer() noexcept { return adam_; }
  std::size_t experts() const noexcept { return 1 + globals_.size(); }
  bool uses_gate() const noexcept { return !globals_.empty(); }

  // Overwrites every global encoder with its source checkpoint. Encoders are
  // frozen except in no_freeze mode, where their optimizer state restarts.
  void sync(const CacheSnapshot& snapshot);
  void load_local_encoder(const ExpertCheckpoint& checkpoint);
  ExpertCheckpoint local_checkpoint() const { return make_checkpoint(local_.encoder); }

  LossGraph<T> build_losses(Tape<T>& tape, std::span<const std::vector<data::ItemId>> prefixes,
                            std::span<const std::vector<data::ItemId>> augmented,
                            std::span<const data::ItemId> targets, ForwardContext& ctx,
                            Objective objective);

  // Forward, backward and one Adam step.
  BatchLog train_batch(std::span<const data::SequenceSample* const> batch, Objective objective,
                       Rng& rng);
  std::vector<BatchLog> train_epoch(Objective objective, Rng& rng);

  // Full-catalog ranks with dropout off and gradients disabled.
  EvalOutput evaluate(std::span<const data::SequenceSample> samples) const;

  // Every parameter with its owner-qualified name ("local.", "global.<id>.",
  // gate names as is).
  template <typename F>
  void for_each_parameter(F&& f) {
    local_.for_each([&](Parameter<T>& p) { f("local." + p.name, p); });
    for (auto& g : globals_) {
      g.params.for_each([&](Parameter<T>& p) { f("global." + g.source + "." + p.name, p); });
    }
    if (uses_gate()) gate_.for_each([&](Parameter<T>& p) { f(p.name, p); });
  }

  // Full client state under qualified names, for saving and reloading.
  ExpertCheckpoint export_state();
  void import_state(const ExpertCheckpoint& state);

  void clear_grads();

 private:
  const data::DomainDataset* data_;
  expert::EncoderConfig encoder_;
  TrainConfig config_;
  expert::BranchParams<T> local_;
  std::vector<GlobalBranch<T>> globals_;
  moe::GateParams<T> gate_;
  Adam<T> adam_;
};

// Syncs (when the mode federates), runs the configured local epochs over
// all branch losses and returns the local encoder. `log` receives one entry
// per batch.
template <typename T>
ExpertCheckpoint client_update(ClientState<T>& client, const CacheSnapshot& snapshot,
                               std::size_t round, std::vector<BatchLog>* log = nullptr);

template <typename T>
ExpertCheckpoint client_update(ClientState<T>& client, const ServerCache& cache,
                               std::vector<BatchLog>* log = nullptr);

// Per-round RNG stream of one client.
Rng client_rng(std::uint64_t seed, const std::string& domain, std::string_view phase,
               std::size_t index);

}  // namespace fmoe::federation
