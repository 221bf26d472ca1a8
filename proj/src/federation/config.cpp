// SPDX-License-Identifier: Apache-2.0
#include "fmoe/federation/config.hpp"

#include <array>
#include <cmath>
#include <set>
#include <utility>

#include "fmoe/errors.hpp"

namespace fmoe::federation {
namespace {

constexpr std::array<std::pair<Mode, std::string_view>, 6> kModes{{
    {Mode::kFmoe, "fmoe"},
    {Mode::kLocalOnly, "local_only"},
    {Mode::kFedAvg, "fedavg"},
    {Mode::kNoGate, "no_gate"},
    {Mode::kNoFreeze, "no_freeze"},
    {Mode::kDropExpert, "drop_expert"},
}};

}  // namespace

std::string_view mode_name(Mode mode) {
  for (const auto& [m, name] : kModes) {
    if (m == mode) return name;
  }
  return "unknown";
}

Mode parse_mode(std::string_view name) {
  for (const auto& [m, n] : kModes) {
    if (n == name) return m;
  }
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (rounds == 0) throw ConfigError("rounds must be at least 1");
  if (local_epochs == 0) throw ConfigError("local epochs must be at least 1");
  if (patience == 0) throw ConfigError("patience must be at least 1");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (eval_batch == 0) throw ConfigError("eval batch must be at least 1");
  if (!(adam.learning_rate > 0.0) || !std::isfinite(adam.learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(shuffle_ratio >= 0.0 && shuffle_ratio <= 1.0)) {
    throw ConfigError("shuffle ratio must lie in [0, 1]");
  }
  for (double w : {weights.local_rec, weights.local_con, weights.global_rec, weights.global_con,
                   weights.moe}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be non-negative");
  }
  if (mode == Mode::kDropExpert) {
    if (dropped_experts.empty()) throw ConfigError("drop_expert needs at least one domain to drop");
    std::set<std::string> seen;
    for (const auto& d : dropped_experts) {
      if (!seen.insert(d).second) throw ConfigError("domain '" + d + "' dropped twice");
      if (d == drop_target) throw ConfigError("cannot drop the target domain's own expert");
    }
  } else if (!dropped_experts.empty()) {
    throw ConfigError("dropped experts are only valid in drop_expert mode");
  }
}

}  // namespace fmoe::federation
