// SPDX-License-Identifier: Apache-2.0
#include "fmoe/federation/client.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fmoe/errors.hpp"
#include "fmoe/eval/metrics.hpp"

namespace fmoe::federation {

using data::ItemId;

Rng client_rng(std::uint64_t seed, const std::string& domain, std::string_view phase,
               std::size_t index) {
  std::string label(phase);
  label += '/';
  label += domain;
  return Rng(derive_seed(seed, label, index));
}

template <typename T>
ClientState<T>::ClientState(const data::DomainDataset& data, std::vector<std::string> sources,
                            const expert::EncoderConfig& encoder, const TrainConfig& config)
    : data_(&data), encoder_(encoder), config_(config), adam_(config.adam) {
  encoder_.validate();
  if (data.num_items == 0) throw EmptyDatasetError("domain " + data.domain_id + " has no items");
  Rng rng = client_rng(config.seed, data.domain_id, "init", 0);
  local_ = expert::init_branch<T>(encoder_, data.num_items, rng);
  for (auto& source : sources) {
    if (source == data.domain_id) throw ConfigError("a client cannot adapt its own encoder");
    GlobalBranch<T> g{source, expert::init_branch<T>(encoder_, data.num_items, rng)};
    g.params.encoder.set_trainable(config.mode == Mode::kNoFreeze);
    globals_.push_back(std::move(g));
  }
  if (!globals_.empty()) {
    gate_ = moe::init_gate<T>(experts(), encoder_.width, config.gate_hidden, rng);
  }
}

template <typename T>
void ClientState<T>::sync(const CacheSnapshot& snapshot) {
  const bool trainable = config_.mode == Mode::kNoFreeze;
  for (auto& g : globals_) {
    auto it = snapshot.find(g.source);
    if (it == snapshot.end()) throw ContractError("no cached checkpoint for domain " + g.source);
    load_checkpoint(it->second, g.params.encoder);
    g.params.encoder.set_trainable(trainable);
    if (trainable) {
      g.params.encoder.for_each(
          [&](Parameter<T>& p) { adam_.reset("global." + g.source + "." + p.name); });
    }
  }
}

template <typename T>
void ClientState<T>::load_local_encoder(const ExpertCheckpoint& checkpoint) {
  load_checkpoint(checkpoint, local_.encoder);
}

template <typename T>
LossGraph<T> ClientState<T>::build_losses(Tape<T>& tape,
                                         std::span<const std::vector<ItemId>> prefixes,
                                         std::span<const std::vector<ItemId>> augmented,
                                         std::span<const ItemId> targets, ForwardContext& ctx,
                                         Objective objective) {
  const std::size_t n = targets.size();
  if (n == 0 || prefixes.size() != n || augmented.size() != n) {
    throw DimensionError("build_losses: prefixes, augmentations and targets must match");
  }
  std::vector<std::vector<ItemId>> stacked(prefixes.begin(), prefixes.end());
  stacked.insert(stacked.end(), augmented.begin(), augmented.end());
  std::vector<std::size_t> first(n), second(n);
  std::iota(first.begin(), first.end(), std::size_t{0});
  std::iota(second.begin(), second.end(), n);

  LossGraph<T> g;
  std::vector<std::pair<Var<T>, double>> terms;
  std::vector<Var<T>> zs, logits;

  auto branch = [&](expert::BranchParams<T>& params, const std::string& label, double w_rec,
                    double w_con) {
    expert::BranchForward<T> fw(tape, params, data_->adjacency, encoder_);
    const auto z_all = fw.encode_z(stacked, ctx);
    const auto z = gather_rows(z_all, std::span<const std::size_t>(first));
    const auto z_aug = gather_rows(z_all, std::span<const std::size_t>(second));
    const auto lg = fw.head(z);
    const auto rec = expert::rec_loss(lg, targets);
    const auto con = expert::contrastive_loss(z, z_aug, config_.temperature);
    g.components.emplace_back(label + ".rec", rec);
    g.components.emplace_back(label + ".con", con);
    terms.emplace_back(rec, w_rec);
    terms.emplace_back(con, w_con);
    zs.push_back(z);
    logits.push_back(lg);
  };

  const auto& w = config_.weights;
  branch(local_, "local", w.local_rec, w.local_con);
  g.distributions.push_back(moe::expert_distribution(logits.front()));
  if (objective == Objective::kFull && uses_gate()) {
    for (auto& gb : globals_) {
      branch(gb.params, gb.source, w.global_rec, w.global_con);
      g.distributions.push_back(moe::expert_distribution(logits.back()));
    }
    g.gate_weights = config_.mode == Mode::kNoGate
                         ? moe::uniform_gate(tape, n, experts())
                         : moe::gate_forward(tape, gate_, std::span<const Var<T>>(zs));
    auto fusion = moe::fuse(std::span<const Var<T>>(g.distributions), g.gate_weights,
                            !config_.moe_grad_to_experts);
    g.mixture = fusion.mixture;
    const auto moe_term = moe::moe_loss(fusion, targets);
    g.components.emplace_back("moe.rec", moe_term);
    terms.emplace_back(moe_term, w.moe);
  }

  for (const auto& [v, weight] : terms) {
    if (weight == 0.0) continue;
    const auto scaled = weight == 1.0 ? v : scale(v, static_cast<T>(weight));
    g.total = g.total.valid() ? add(g.total, scaled) : scaled;
  }
  if (!g.total.valid()) g.total = tape.constant(Tensor<T>::scalar(T{0}));
  return g;
}

template <typename T>
void ClientState<T>::clear_grads() {
  for_each_parameter([](const std::string&, Parameter<T>& p) { p.tensor.clear_grad(); });
}

template <typename T>
BatchLog ClientState<T>::train_batch(std::span<const data::SequenceSample* const> batch,
                                     Objective objective, Rng& rng) {
  std::vector<std::vector<ItemId>> prefixes, augmented;
  std::vector<ItemId> targets;
  prefixes.reserve(batch.size());
  augmented.reserve(batch.size());
  for (const auto* s : batch) {
    prefixes.push_back(s->prefix);
    augmented.push_back(data::augment(s->prefix, config_.shuffle_ratio, rng));
    targets.push_back(s->target);
  }
  clear_grads();
  Tape<T> tape(true);
  ForwardContext ctx{true, &rng};
  auto graph = build_losses(tape, prefixes, augmented, targets, ctx, objective);

  BatchLog log;
  log.total = static_cast<double>(graph.total.value().item());
  for (const auto& [name, v] : graph.components) {
    log.components.push_back({name, static_cast<double>(v.value().item())});
  }
  if (!std::isfinite(log.total)) {
    throw NumericError("non-finite training loss in domain " + domain_id());
  }
  tape.backward(graph.total);
  for_each_parameter([&](const std::string& key, Parameter<T>& p) { adam_.step(key, p); });
  clear_grads();
  return log;
}

template <typename T>
std::vector<BatchLog> ClientState<T>::train_epoch(Objective objective, Rng& rng) {
  const auto& samples = data_->train;
  if (samples.empty()) throw EmptyDatasetError("domain " + domain_id() + " has no training samples");
  std::vector<const data::SequenceSample*> order;
  order.reserve(samples.size());
  for (const auto& s : samples) order.push_back(&s);
  rng.shuffle(order.begin(), order.end());
  std::vector<BatchLog> logs;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    auto end = std::min(order.size(), start + config_.batch_size);
    // A lone trailing sample has no in-batch negatives; fold it in.
    if (order.size() - end == 1) end = order.size();
    logs.push_back(train_batch(std::span<const data::SequenceSample* const>(
                                   order.data() + start, end - start),
                               objective, rng));
  }
  return logs;
}

template <typename T>
EvalOutput ClientState<T>::evaluate(std::span<const data::SequenceSample> samples) const {
  auto& self = const_cast<ClientState&>(*this);
  EvalOutput out;
  out.ranks.reserve(samples.size());
  if (uses_gate()) out.mean_gate.assign(experts(), 0.0);
  ForwardContext ctx{false, nullptr};
  for (std::size_t start = 0; start < samples.size(); start += config_.eval_batch) {
    const auto end = std::min(samples.size(), start + config_.eval_batch);
    const std::size_t n = end - start;
    std::vector<std::vector<ItemId>> prefixes;
    prefixes.reserve(n);
    for (std::size_t i = start; i < end; ++i) prefixes.push_back(samples[i].prefix);

    Tape<T> tape(false);
    std::vector<Var<T>> zs, dists;
    Var<T> local_logits;
    auto run = [&](expert::BranchParams<T>& params) {
      expert::BranchForward<T> fw(tape, params, data_->adjacency, encoder_);
      auto enc = fw.encode(prefixes, ctx);
      zs.push_back(enc.z);
      dists.push_back(moe::expert_distribution(enc.logits));
      return enc.logits;
    };
    local_logits = run(self.local_);
    const Tensor<T>* scores = &local_logits.value();
    Var<T> mixture;
    if (uses_gate()) {
      for (auto& gb : self.globals_) run(gb.params);
      const auto gates = config_.mode == Mode::kNoGate
                             ? moe::uniform_gate(tape, n, experts())
                             : moe::gate_forward(tape, self.gate_, std::span<const Var<T>>(zs));
      mixture = moe::fuse(std::span<const Var<T>>(dists), gates).mixture;
      scores = &mixture.value();
      const auto& gv = gates.value();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t e = 0; e < experts(); ++e) out.mean_gate[e] += static_cast<double>(gv(r, e));
      }
    }
    const std::size_t cols = scores->cols();
    std::vector<ItemId> exclude;
    for (std::size_t r = 0; r < n; ++r) {
      const auto& s = samples[start + r];
      exclude.clear();
      if (config_.exclude_seen) {
        for (ItemId it : s.prefix) {
          if (it != data::kPadding && it != s.target &&
              std::find(exclude.begin(), exclude.end(), it) == exclude.end()) {
            exclude.push_back(it);
          }
        }
      }
      std::span<const T> row(scores->data() + r * cols, cols);
      out.ranks.push_back(eval::rank_target<T>(row, s.target, exclude));
    }
  }
  if (!samples.empty()) {
    for (auto& g : out.mean_gate) g /= static_cast<double>(samples.size());
  }
  return out;
}

template <typename T>
ExpertCheckpoint ClientState<T>::export_state() {
  ExpertCheckpoint ck;
  for_each_parameter([&](const std::string& key, Parameter<T>& p) {
    const auto v = p.tensor.values();
    ck.entries.push_back({key, p.tensor.shape(), std::vector<float>(v.begin(), v.end())});
  });
  return ck;
}

template <typename T>
void ClientState<T>::import_state(const ExpertCheckpoint& state) {
  std::size_t i = 0;
  for_each_parameter([&](const std::string& key, Parameter<T>& p) {
    if (i >= state.entries.size()) throw FormatError("client state is missing '" + key + "'");
    const auto& e = state.entries[i++];
    if (e.name != key || e.shape != p.tensor.shape()) {
      throw FormatError("client state entry '" + e.name + "' does not match '" + key + "'");
    }
    auto dst = p.tensor.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(e.values[k]);
  });
  if (i != state.entries.size()) throw FormatError("client state has extra entries");
}

template <typename T>
ExpertCheckpoint client_update(ClientState<T>& client, const CacheSnapshot& snapshot,
                               std::size_t round, std::vector<BatchLog>* log) {
  const auto mode = client.config().mode;
  if (mode == Mode::kFedAvg) {
    auto it = snapshot.find(client.domain_id());
    if (it == snapshot.end()) throw ContractError("no shared encoder for " + client.domain_id());
    client.load_local_encoder(it->second);
  } else if (client.uses_gate()) {
    client.sync(snapshot);
  }
  const auto objective = mode == Mode::kLocalOnly || mode == Mode::kFedAvg ? Objective::kLocal
                                                                           : Objective::kFull;
  Rng rng = client_rng(client.config().seed, client.domain_id(), "round", round);
  for (std::size_t e = 0; e < client.config().local_epochs; ++e) {
    auto logs = client.train_epoch(objective, rng);
    if (log) log->insert(log->end(), logs.begin(), logs.end());
  }
  return client.local_checkpoint();
}

template <typename T>
ExpertCheckpoint client_update(ClientState<T>& client, const ServerCache& cache,
                               std::vector<BatchLog>* log) {
  return client_update(client, cache.snapshot(), cache.round(), log);
}

#define FMOE_INSTANTIATE_CLIENT(T)                                                        \
  template class ClientState<T>;                                                          \
  template ExpertCheckpoint client_update<T>(ClientState<T>&, const CacheSnapshot&,       \
                                             std::size_t, std::vector<BatchLog>*);        \
  template ExpertCheckpoint client_update<T>(ClientState<T>&, const ServerCache&,         \
                                             std::vector<BatchLog>*);

FMOE_INSTANTIATE_CLIENT(float)
FMOE_INSTANTIATE_CLIENT(double)

}  // namespace fmoe::federation
