// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fmoe/data/dataset.hpp"
#include "fmoe/numerics/ops.hpp"
#include "fmoe/random.hpp"

namespace fmoe::expert {

using data::ItemId;

struct EncoderConfig {
  std::size_t width = 64;
  std::size_t blocks = 2;
  std::size_t heads = 1;
  std::size_t ffn_multiplier = 4;
  std::size_t gnn_depth = 2;
  std::size_t max_len = 16;
  double dropout = 0.3;

  void validate() const;
};

// One pre-norm causal self-attention block.
template <typename T>
struct AttentionBlock {
  Parameter<T> norm1_gain, norm1_bias;
  Parameter<T> query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  Parameter<T> norm2_gain, norm2_bias;
  Parameter<T> ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;

  template <typename F>
  void for_each(F&& f) {
    for (auto* p : {&norm1_gain, &norm1_bias, &query_w, &query_b, &key_w, &key_b, &value_w,
                    &value_b, &out_w, &out_b, &norm2_gain, &norm2_bias, &ffn_in_w, &ffn_in_b,
                    &ffn_out_w, &ffn_out_b}) {
      f(*p);
    }
  }
};

// The self-attention stack: exactly what an expert checkpoint carries.
template <typename T>
struct ExpertEncoderParams {
  std::vector<AttentionBlock<T>> blocks;
  Parameter<T> final_gain, final_bias;

  template <typename F>
  void for_each(F&& f) {
    for (auto& b : blocks) b.for_each(f);
    f(final_gain);
    f(final_bias);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<ExpertEncoderParams*>(this)->for_each(
        [&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }

  void set_trainable(bool trainable) {
    for_each([&](Parameter<T>& p) { p.trainable = trainable; });
  }
};

// d -> d (GELU) -> |S| projector.
template <typename T>
struct PredictionHead {
  Parameter<T> hidden_w, hidden_b, out_w, out_b;
};

// Embeddings, positions and head of one expert plus its encoder. For a
// global branch only the encoder is frozen.
template <typename T>
struct BranchParams {
  Parameter<T> item_embeddings;      // (|S| + 1) x d, row 0 = padding
  Parameter<T> position_embeddings;  // max_len x d
  PredictionHead<T> head;
  ExpertEncoderParams<T> encoder;

  template <typename F>
  void for_each(F&& f) {
    f(item_embeddings);
    f(position_embeddings);
    f(head.hidden_w);
    f(head.hidden_b);
    f(head.out_w);
    f(head.out_b);
    encoder.for_each(f);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<BranchParams*>(this)->for_each(
        [&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }

  std::size_t num_items() const { return item_embeddings.tensor.rows() - 1; }
};

template <typename T>
ExpertEncoderParams<T> init_encoder(const EncoderConfig& config, Rng& rng);

template <typename T>
BranchParams<T> init_branch(const EncoderConfig& config, std::size_t num_items, Rng& rng);

// S_0 = embeddings, S_l = A * S_{l-1}; returns S_depth.
template <typename T>
Var<T> gnn_propagate(const SparseMatrix& norm_adjacency, const Var<T>& embeddings,
                     std::size_t depth);

template <typename T>
struct EncodedBatch {
  Var<T> z;       // n x d, representation at the last position
  Var<T> logits;  // n x |S|; column c scores item c + 1
};

// Binds one branch onto a tape. The propagated item table is computed once
// and shared by every encode() call on this object.
template <typename T>
class BranchForward {
 public:
  BranchForward(Tape<T>& tape, BranchParams<T>& branch, const SparseMatrix& adjacency,
                const EncoderConfig& config);

  // All position outputs, (n * max_len) x d. Prefixes are left-padded to
  // max_len; an all-padding prefix is a contract error.
  Var<T> states(std::span<const std::vector<ItemId>> prefixes, ForwardContext& ctx);

  // Last-position rows of states(), computed without the unused positions of
  // the final block.
  Var<T> encode_z(std::span<const std::vector<ItemId>> prefixes, ForwardContext& ctx);
  Var<T> head(const Var<T>& z);
  EncodedBatch<T> encode(std::span<const std::vector<ItemId>> prefixes, ForwardContext& ctx);

 private:
  Var<T> run(std::span<const std::vector<ItemId>> prefixes, ForwardContext& ctx, bool last_only);

  struct Block {
    Var<T> n1g, n1b, qw, qb, kw, kb, vw, vb, ow, ob, n2g, n2b, f1w, f1b, f2w, f2b;
  };
  Tape<T>* tape_;
  const EncoderConfig* config_;
  Var<T> table_;
  Var<T> positions_;
  std::vector<Block> blocks_;
  Var<T> final_gain_, final_bias_;
  Var<T> head_hw_, head_hb_, head_ow_, head_ob_;
};

template <typename T>
EncodedBatch<T> encode(Tape<T>& tape, std::span<const std::vector<ItemId>> prefixes,
                       BranchParams<T>& branch, const SparseMatrix& adjacency,
                       const EncoderConfig& config, ForwardContext& ctx);

// Cross entropy of logits against 1-based item targets.
template <typename T>
Var<T> rec_loss(const Var<T>& logits, std::span<const ItemId> targets);

// Symmetric in-batch InfoNCE with dot-product similarity / temperature.
// Batches smaller than two give a zero constant and a warning.
template <typename T>
Var<T> contrastive_loss(const Var<T>& z, const Var<T>& z_aug, double temperature);

}  // namespace fmoe::expert
