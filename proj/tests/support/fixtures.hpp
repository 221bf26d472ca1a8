// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <vector>

#include "fmoe/data/synthetic.hpp"
#include "fmoe/expert/expert.hpp"
#include "fmoe/federation/config.hpp"

namespace fmoe::testing {

inline data::SyntheticSpec small_spec(std::uint64_t seed, double correlation = 0.9,
                                      std::size_t users = 40, std::size_t items = 30) {
  data::SyntheticSpec s;
  s.users_per_domain = users;
  s.items_per_domain = items;
  s.clusters = 6;
  s.min_length = 4;
  s.max_length = 8;
  s.correlation = correlation;
  s.seed = seed;
  return s;
}

inline data::ScenarioSpec small_scenario(std::uint64_t seed, double correlation = 0.9,
                                         std::size_t users = 40, std::size_t items = 30) {
  data::DataConfig cfg;
  cfg.max_prefix = 8;
  return data::generate_synthetic(small_spec(seed, correlation, users, items), cfg);
}

inline expert::EncoderConfig small_encoder(std::size_t max_len = 8) {
  expert::EncoderConfig e;
  e.width = 8;
  e.blocks = 1;
  e.heads = 1;
  e.ffn_multiplier = 2;
  e.gnn_depth = 1;
  e.max_len = max_len;
  e.dropout = 0.1;
  return e;
}

inline federation::TrainConfig small_train(federation::Mode mode, std::uint64_t seed = 1) {
  federation::TrainConfig t;
  t.mode = mode;
  t.rounds = 2;
  t.local_epochs = 1;
  t.patience = 5;
  t.batch_size = 32;
  t.adam.learning_rate = 3e-3;
  t.seed = seed;
  return t;
}

template <typename T>
std::vector<unsigned char> raw_bytes(const Parameter<T>& p) {
  std::vector<unsigned char> out(p.tensor.size() * sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), p.tensor.data(), out.size());
  return out;
}

}  // namespace fmoe::testing
