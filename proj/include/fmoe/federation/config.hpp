// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fmoe/expert/expert.hpp"
#include "fmoe/numerics/adam.hpp"

namespace fmoe::federation {

enum class Mode { kFmoe, kLocalOnly, kFedAvg, kNoGate, kNoFreeze, kDropExpert };

std::string_view mode_name(Mode mode);
// Accepts the names produced by mode_name; ConfigError otherwise.
Mode parse_mode(std::string_view name);

struct LossWeights {
  double local_rec = 1.0;
  double local_con = 1.0;
  double global_rec = 1.0;
  double global_con = 1.0;
  double moe = 1.0;
};

struct TrainConfig {
  Mode mode = Mode::kFmoe;
  std::size_t rounds = 40;
  std::size_t local_epochs = 3;
  std::size_t patience = 5;
  std::size_t batch_size = 256;
  AdamConfig adam;
  double temperature = 1.0;
  double shuffle_ratio = 0.6;
  LossWeights weights;
  std::size_t gate_hidden = 0;
  // Lets the fused loss reach the experts as well as the gate.
  bool moe_grad_to_experts = false;
  // drop_expert: domains whose checkpoints are withheld. With a target
  // domain only that client loses them; otherwise every other client does.
  std::vector<std::string> dropped_experts;
  std::string drop_target;
  bool exclude_seen = false;
  bool parallel_clients = false;
  std::size_t eval_batch = 512;
  std::uint64_t seed = 0;

  // Checks everything that does not need the scenario.
  void validate() const;
};

}  // namespace fmoe::federation
