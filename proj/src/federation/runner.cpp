// SPDX-License-Identifier: Apache-2.0
#include "fmoe/federation/runner.hpp"

#include <algorithm>
#include <exception>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "fmoe/errors.hpp"
#include "fmoe/log.hpp"

namespace fmoe::federation {
namespace {

// Runs fn(i) for every i in `order`; concurrently when `parallel`. The
// first failure in `order` is rethrown after all workers finish.
template <typename Fn>
void for_each_client(std::span<const std::size_t> order, bool parallel, Fn&& fn) {
  if (!parallel || order.size() < 2) {
    for (auto i : order) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(order.size());
  std::vector<std::thread> workers;
  workers.reserve(order.size());
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    workers.emplace_back([&, slot] {
      try {
        fn(order[slot]);
      } catch (...) {
        errors[slot] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<std::size_t> natural_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return order;
}

std::vector<LossComponent> mean_losses(const std::vector<BatchLog>& logs) {
  std::vector<LossComponent> out;
  if (logs.empty()) return out;
  out.push_back({"total", 0.0});
  for (const auto& c : logs.front().components) out.push_back({c.name, 0.0});
  for (const auto& log : logs) {
    out[0].value += log.total;
    for (std::size_t i = 0; i < log.components.size() && i + 1 < out.size(); ++i) {
      out[i + 1].value += log.components[i].value;
    }
  }
  for (auto& c : out) c.value /= static_cast<double>(logs.size());
  return out;
}

}  // namespace

std::vector<std::vector<std::string>> resolve_sources(const data::ScenarioSpec& scenario,
                                                      const TrainConfig& config) {
  const std::size_t d = scenario.size();
  std::vector<std::vector<std::string>> sources(d);
  if (config.mode == Mode::kLocalOnly || config.mode == Mode::kFedAvg) return sources;
  if (config.mode == Mode::kDropExpert) {
    for (const auto& id : config.dropped_experts) scenario.index_of(id);
    if (!config.drop_target.empty()) scenario.index_of(config.drop_target);
  }
  for (std::size_t k = 0; k < d; ++k) {
    const auto& own = scenario.domains[k].domain_id;
    const bool dropping = config.mode == Mode::kDropExpert &&
                          (config.drop_target.empty() || config.drop_target == own);
    for (std::size_t j = 0; j < d; ++j) {
      const auto& other = scenario.domains[j].domain_id;
      if (j == k) continue;
      if (dropping && std::find(config.dropped_experts.begin(), config.dropped_experts.end(),
                                other) != config.dropped_experts.end()) {
        continue;
      }
      sources[k].push_back(other);
    }
  }
  return sources;
}

template <typename T>
Federation<T>::Federation(const data::ScenarioSpec& scenario,
                          const expert::EncoderConfig& encoder, const TrainConfig& config)
    : scenario_(&scenario), config_(config) {
  config_.validate();
  encoder.validate();
  data::validate_scenario(scenario);
  const auto sources = resolve_sources(scenario, config_);
  clients_.reserve(scenario.size());
  for (std::size_t k = 0; k < scenario.size(); ++k) {
    clients_.emplace_back(scenario.domains[k], sources[k], encoder, config_);
  }
  round_logs_.resize(clients_.size());

  if (config_.mode == Mode::kLocalOnly) return;
  if (config_.mode == Mode::kFedAvg) {
    // One shared starting point; its average is itself.
    const auto shared = clients_.front().local_checkpoint();
    for (auto& c : clients_) {
      c.load_local_encoder(shared);
      cache_.upload(c.domain_id(), c.local_checkpoint());
    }
    cache_.commit_average();
    return;
  }
  for (auto& c : clients_) cache_.upload(c.domain_id(), c.local_checkpoint());
  cache_.commit();
}

template <typename T>
void Federation<T>::run_round(std::size_t round, std::span<const std::size_t> order) {
  const auto natural = natural_order(clients_.size());
  if (order.empty()) order = natural;
  if (order.size() != clients_.size()) throw ContractError("client order must cover every client");

  const CacheSnapshot snapshot = cache_.snapshot();
  std::vector<ExpertCheckpoint> uploads(clients_.size());
  for (auto& logs : round_logs_) logs.clear();
  for_each_client(order, config_.parallel_clients, [&](std::size_t k) {
    uploads[k] = client_update(clients_[k], snapshot, round, &round_logs_[k]);
  });

  if (config_.mode == Mode::kLocalOnly) return;
  for (std::size_t k = 0; k < clients_.size(); ++k) {
    cache_.upload(clients_[k].domain_id(), std::move(uploads[k]));
  }
  if (config_.mode == Mode::kFedAvg) {
    cache_.commit_average();
    for (auto& c : clients_) c.load_local_encoder(cache_.at(c.domain_id()));
  } else {
    cache_.commit();
  }
}

template <typename T>
RoundRecord Federation<T>::evaluate(std::size_t round) const {
  const std::size_t d = clients_.size();
  std::vector<EvalOutput> valid(d), test(d);
  for_each_client(natural_order(d), config_.parallel_clients, [&](std::size_t k) {
    valid[k] = clients_[k].evaluate(clients_[k].data().valid);
    test[k] = clients_[k].evaluate(clients_[k].data().test);
  });
  RoundRecord rec;
  rec.round = round;
  std::vector<eval::DomainMetrics> vm, tm;
  for (std::size_t k = 0; k < d; ++k) {
    const auto& id = clients_[k].domain_id();
    vm.push_back({id, eval::compute_metrics(valid[k].ranks), valid[k].ranks.size()});
    tm.push_back({id, eval::compute_metrics(test[k].ranks), test[k].ranks.size()});
    rec.gate_weights.push_back(valid[k].mean_gate);
    rec.train_losses.push_back(mean_losses(round_logs_[k]));
  }
  const std::string mode(mode_name(config_.mode));
  rec.valid = eval::make_report(round, mode, "valid", std::move(vm));
  rec.test = eval::make_report(round, mode, "test", std::move(tm));
  for (const auto& c : clients_) {
    rec.cache_fingerprints.push_back(cache_.contains(c.domain_id())
                                         ? fingerprint(cache_.at(c.domain_id()))
                                         : 0);
  }
  return rec;
}

template <typename T>
RunResult Federation<T>::drive(std::string label, const std::function<void(std::size_t)>& step,
                               const RoundCallback& on_round) {
  RunResult result;
  result.mode = std::move(label);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t t = 0; t < config_.rounds; ++t) {
    step(t);
    auto rec = evaluate(t);
    for (auto* report : {&rec.valid, &rec.test}) report->mode = result.mode;
    log_info("round " + std::to_string(t) + " " + result.mode + " valid avg MRR " +
             std::to_string(rec.valid.average.mrr));
    result.history.push_back(std::move(rec));
    const auto& last = result.history.back();
    if (on_round) on_round(last);
    if (last.valid.average.mrr > best) {
      best = last.valid.average.mrr;
      result.best_index = result.history.size() - 1;
      since_best = 0;
      best_states_.clear();
      for (auto& c : clients_) best_states_.push_back(c.export_state());
    } else if (++since_best >= config_.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

template <typename T>
RunResult Federation<T>::run(const RoundCallback& on_round) {
  return drive(std::string(mode_name(config_.mode)), [&](std::size_t t) { run_round(t); },
               on_round);
}

template <typename T>
RunResult Federation<T>::run_two_phase(std::size_t pretrain_epochs,
                                       const RoundCallback& on_round) {
  if (config_.mode == Mode::kLocalOnly || config_.mode == Mode::kFedAvg) {
    throw ConfigError("the two-phase schedule needs a mode with global experts");
  }
  const auto order = natural_order(clients_.size());
  for_each_client(order, config_.parallel_clients, [&](std::size_t k) {
    Rng rng = client_rng(config_.seed, clients_[k].domain_id(), "pretrain", 0);
    for (std::size_t e = 0; e < pretrain_epochs; ++e) {
      clients_[k].train_epoch(Objective::kLocal, rng);
    }
  });
  for (auto& c : clients_) cache_.upload(c.domain_id(), c.local_checkpoint());
  cache_.commit();
  const auto snapshot = cache_.snapshot();
  for (auto& c : clients_) c.sync(snapshot);

  auto step = [&](std::size_t t) {
    for (auto& logs : round_logs_) logs.clear();
    for_each_client(order, config_.parallel_clients, [&](std::size_t k) {
      auto& c = clients_[k];
      Rng rng = client_rng(config_.seed, c.domain_id(), "finetune", t);
      for (std::size_t e = 0; e < config_.local_epochs; ++e) {
        auto logs = c.train_epoch(Objective::kFull, rng);
        round_logs_[k].insert(round_logs_[k].end(), logs.begin(), logs.end());
      }
    });
  };
  return drive("two_phase_" + std::to_string(pretrain_epochs), step, on_round);
}

template <typename T>
RunResult run_federation(const data::ScenarioSpec& scenario, const expert::EncoderConfig& encoder,
                         const TrainConfig& config) {
  Federation<T> fed(scenario, encoder, config);
  return fed.run();
}

template <typename T>
RunResult run_two_phase(const data::ScenarioSpec& scenario, const expert::EncoderConfig& encoder,
                        const TrainConfig& config, std::size_t pretrain_epochs) {
  Federation<T> fed(scenario, encoder, config);
  return fed.run_two_phase(pretrain_epochs);
}

#define FMOE_INSTANTIATE_RUNNER(T)                                                           \
  template class Federation<T>;                                                              \
  template RunResult run_federation<T>(const data::ScenarioSpec&, const expert::EncoderConfig&, \
                                       const TrainConfig&);                                  \
  template RunResult run_two_phase<T>(const data::ScenarioSpec&, const expert::EncoderConfig&,  \
                                      const TrainConfig&, std::size_t);

FMOE_INSTANTIATE_RUNNER(float)
FMOE_INSTANTIATE_RUNNER(double)

}  // namespace fmoe::federation
