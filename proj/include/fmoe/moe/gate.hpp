// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "fmoe/data/dataset.hpp"
#include "fmoe/numerics/ops.hpp"

namespace fmoe::moe {

// Softmax router over E experts from the concatenated E * d representation.
// Linear by default; `hidden > 0` inserts one GELU layer. The output layer
// starts at zero so the initial gate is uniform.
template <typename T>
struct GateParams {
  std::size_t experts = 0;
  std::size_t width = 0;
  std::size_t hidden = 0;
  Parameter<T> hidden_w, hidden_b;  // used only when hidden > 0
  Parameter<T> weight, bias;

  template <typename F>
  void for_each(F&& f) {
    if (hidden > 0) {
      f(hidden_w);
      f(hidden_b);
    }
    f(weight);
    f(bias);
  }
};

template <typename T>
GateParams<T> init_gate(std::size_t experts, std::size_t width, std::size_t hidden, Rng& rng);

// Concatenates z_list (local first), stops the gradient, applies the gate.
// Gradients reach only the gate parameters.
template <typename T>
Var<T> gate_forward(Tape<T>& tape, GateParams<T>& gate, std::span<const Var<T>> z_list);

// Uniform weights for the fixed-fusion ablation.
template <typename T>
Var<T> uniform_gate(Tape<T>& tape, std::size_t rows, std::size_t experts);

template <typename T>
struct FusionOutput {
  Var<T> mixture;       // rows x |S| probability vectors
  Var<T> gate_weights;  // rows x E
};

// Row-wise softmax of each expert's logits.
template <typename T>
Var<T> expert_distribution(const Var<T>& logits);

// Convex combination of expert distributions. With `isolate_experts` the
// distributions are stop-gradiented so the fused loss trains the gate only.
template <typename T>
FusionOutput<T> fuse(std::span<const Var<T>> distributions, const Var<T>& gate_weights,
                     bool isolate_experts = true);

inline constexpr double kProbabilityFloor = 1e-12;

// -log(mixture[target] + floor) averaged over rows; 1-based targets.
template <typename T>
Var<T> moe_loss(const FusionOutput<T>& fusion, std::span<const data::ItemId> targets);

}  // namespace fmoe::moe
