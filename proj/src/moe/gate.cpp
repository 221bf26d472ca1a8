// SPDX-License-Identifier: Apache-2.0
#include "fmoe/moe/gate.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "fmoe/errors.hpp"

namespace fmoe::moe {

template <typename T>
GateParams<T> init_gate(std::size_t experts, std::size_t width, std::size_t hidden, Rng& rng) {
  if (experts == 0 || width == 0) throw ConfigError("gate needs experts and width");
  GateParams<T> g;
  g.experts = experts;
  g.width = width;
  g.hidden = hidden;
  const std::size_t in = experts * width;
  std::size_t out_in = in;
  if (hidden > 0) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + hidden));
    Tensor<T> w(Shape{in, hidden});
    for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-limit, limit));
    g.hidden_w = {"gate.hidden.weight", std::move(w), true};
    g.hidden_b = {"gate.hidden.bias", Tensor<T>(Shape{hidden}), true};
    out_in = hidden;
  }
  g.weight = {"gate.weight", Tensor<T>(Shape{out_in, experts}), true};
  g.bias = {"gate.bias", Tensor<T>(Shape{experts}), true};
  return g;
}

template <typename T>
Var<T> gate_forward(Tape<T>& tape, GateParams<T>& gate, std::span<const Var<T>> z_list) {
  if (z_list.size() != gate.experts) {
    throw DimensionError("gate_forward: " + std::to_string(z_list.size()) +
                         " representations for a gate over " + std::to_string(gate.experts) +
                         " experts");
  }
  for (const auto& z : z_list) {
    if (z.cols() != gate.width || z.rows() != z_list[0].rows()) {
      throw DimensionError("gate_forward: representation shape " + shape_string(z.shape()) +
                           " does not match gate width " + std::to_string(gate.width));
    }
  }
  Var<T> x = stop_gradient(concat_cols(z_list));
  if (gate.hidden > 0) {
    x = gelu(add_bias(matmul(x, tape.leaf(gate.hidden_w)), tape.leaf(gate.hidden_b)));
  }
  return softmax(add_bias(matmul(x, tape.leaf(gate.weight)), tape.leaf(gate.bias)), 1);
}

template <typename T>
Var<T> uniform_gate(Tape<T>& tape, std::size_t rows, std::size_t experts) {
  return tape.constant(
      Tensor<T>(Shape{rows, experts}, static_cast<T>(1.0 / static_cast<double>(experts))));
}

template <typename T>
Var<T> expert_distribution(const Var<T>& logits) {
  return softmax(logits, 1);
}

template <typename T>
FusionOutput<T> fuse(std::span<const Var<T>> distributions, const Var<T>& gate_weights,
                     bool isolate_experts) {
  if (distributions.empty()) throw ContractError("fuse: no expert distributions");
  std::vector<Var<T>> parts;
  parts.reserve(distributions.size());
  for (const auto& d : distributions) {
    if (d.cols() != distributions[0].cols()) {
      throw DimensionError("fuse: distribution widths differ: " + shape_string(d.shape()) +
                           " vs " + shape_string(distributions[0].shape()));
    }
    parts.push_back(isolate_experts ? stop_gradient(d) : d);
  }
  return {weighted_mixture(gate_weights, std::span<const Var<T>>(parts)), gate_weights};
}

template <typename T>
Var<T> moe_loss(const FusionOutput<T>& fusion, std::span<const data::ItemId> targets) {
  std::vector<std::size_t> cls(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == data::kPadding) throw IndexError("moe_loss: padding target");
    cls[i] = targets[i] - 1;
  }
  return probability_nll(fusion.mixture, std::span<const std::size_t>(cls),
                         static_cast<T>(kProbabilityFloor));
}

#define FMOE_INSTANTIATE_MOE(T)                                                              \
  template GateParams<T> init_gate<T>(std::size_t, std::size_t, std::size_t, Rng&);          \
  template Var<T> gate_forward<T>(Tape<T>&, GateParams<T>&, std::span<const Var<T>>);        \
  template Var<T> uniform_gate<T>(Tape<T>&, std::size_t, std::size_t);                       \
  template Var<T> expert_distribution<T>(const Var<T>&);                                     \
  template FusionOutput<T> fuse<T>(std::span<const Var<T>>, const Var<T>&, bool);            \
  template Var<T> moe_loss<T>(const FusionOutput<T>&, std::span<const data::ItemId>);

FMOE_INSTANTIATE_MOE(float)
FMOE_INSTANTIATE_MOE(double)

}  // namespace fmoe::moe
