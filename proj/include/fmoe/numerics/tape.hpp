// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "fmoe/errors.hpp"
#include "fmoe/numerics/tensor.hpp"

namespace fmoe {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid for the
// lifetime of the tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Wengert list. Operations append nodes in execution order; backward()
// walks them in exact reverse. A tape is single-threaded.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Reads the parameter value. Gradients flow back into the parameter's
  // accumulator only when it is trainable.
  Var<T> leaf(Parameter<T>& param) {
    const bool rg = grad_enabled_ && param.trainable;
    const auto v = param.tensor.values();
    nodes_.push_back(Node{Tensor<T>(param.tensor.shape(),
                                    std::vector<T>(v.begin(), v.end())),
                          rg, rg ? &param : nullptr, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), false, nullptr, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  // Used by operation implementations. `fn` is dropped when no input
  // requires a gradient.
  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    const bool rg = grad_enabled_ && requires_grad;
    nodes_.push_back(Node{std::move(value), rg, nullptr,
                          rg ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient flowing into node `id` (all zeros if nothing reached it).
  std::span<const T> grad(std::size_t id) {
    return nodes_[id].value.grad_accumulator();
  }
  // Accumulator of an input; only call when requires_grad(id).
  std::span<T> accumulator(std::size_t id) {
    return nodes_[id].value.grad_accumulator();
  }

  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw ContractError("loss belongs to another tape");
    if (nodes_.empty()) throw ContractError("backward on empty tape");
    if (value(loss.id()).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_string(value(loss.id()).shape()));
    }
    for (auto& n : nodes_) n.value.clear_grad();
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].value.grad_accumulator()[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.value.has_grad()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.source != nullptr) {
        auto src = n.value.grad();
        auto dst = n.source->tensor.grad_accumulator();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    Parameter<T>* source = nullptr;
    BackwardFn backward;
  };
  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace fmoe
