// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable operations over Tape-recorded values. All operations treat
// their operands as row-major matrices (rank < 2 is a single row). Gradients
// are accumulated additively; callers own zeroing.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fmoe/numerics/sparse.hpp"
#include "fmoe/numerics/tape.hpp"
#include "fmoe/random.hpp"

namespace fmoe {

// Train-mode switch and the random stream used by dropout.
struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;
};

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> transpose(const Var<T>& a);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

// x[r, c] + bias[c].
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

// x[r, c] * factors[r]; factors are constants.
template <typename T>
Var<T> scale_rows(const Var<T>& x, std::span<const T> factors);

template <typename T>
Var<T> sum(const Var<T>& a);

template <typename T>
Var<T> mean(const Var<T>& a);

// Concatenation along the last axis; all parts need equal row counts.
template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts);

// out[i] = table[indices[i]]. With `padding_index` >= 0, rows gathered from
// that index receive no gradient.
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> indices,
                   long padding_index = -1);

// Numerically stabilised softmax along axis 0 (columns) or 1 (rows).
template <typename T>
Var<T> softmax(const Var<T>& x, int axis = 1);

// Mean over rows of -log softmax(logits[r])[targets[r]], via log-sum-exp.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::size_t> targets);

// Identity forward; blocks every gradient to x's producers.
template <typename T>
Var<T> stop_gradient(const Var<T>& x);

// Per-row normalisation to zero mean / unit variance, then gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5));

// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x);

// Inverted dropout; identity outside train mode or when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, ForwardContext& ctx);

// Constant sparse matrix times dense x.
template <typename T>
Var<T> sparse_matmul(const SparseMatrix& a, const Var<T>& x);

// Multi-head scaled dot-product attention over `k.rows() / seq_len`
// independent sequences. q may hold only the last q_len positions of each
// sequence (q.rows() = n_seq * q_len). A query at position i attends key j
// only when j <= i and key_valid[j]; queries with no admissible key produce
// zeros. Dropout (train mode) is applied to the attention weights.
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                        std::span<const std::uint8_t> key_valid,
                        std::size_t seq_len, std::size_t heads, double dropout_p,
                        ForwardContext& ctx);

// out[r, :] = sum_e gates[r, e] * parts[e][r, :].
template <typename T>
Var<T> weighted_mixture(const Var<T>& gates, std::span<const Var<T>> parts);

// Mean over rows of -log(probs[r, targets[r]] + floor).
template <typename T>
Var<T> probability_nll(const Var<T>& probs, std::span<const std::size_t> targets,
                       T floor = T(1e-12));

}  // namespace fmoe
