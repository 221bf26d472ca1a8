// SPDX-License-Identifier: Apache-2.0
#include "fmoe/expert/expert.hpp"

#include <cmath>
#include <string>

#include "fmoe/errors.hpp"
#include "fmoe/log.hpp"

namespace fmoe::expert {
namespace {

template <typename T>
Parameter<T> uniform_matrix(std::string name, std::size_t fan_in, std::size_t fan_out,
                            Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(Shape{fan_in, fan_out});
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  return {std::move(name), std::move(t), true};
}

template <typename T>
Parameter<T> filled(std::string name, std::size_t n, T value) {
  return {std::move(name), Tensor<T>(Shape{n}, value), true};
}

template <typename T>
Parameter<T> normal_matrix(std::string name, std::size_t rows, std::size_t cols, double stddev,
                           Rng& rng) {
  Tensor<T> t(Shape{rows, cols});
  for (auto& v : t.values()) v = static_cast<T>(stddev * rng.normal());
  return {std::move(name), std::move(t), true};
}

}  // namespace

void EncoderConfig::validate() const {
  if (width == 0 || blocks == 0 || heads == 0 || max_len == 0 || ffn_multiplier == 0) {
    throw ConfigError("encoder width, blocks, heads, ffn multiplier and max_len must be positive");
  }
  if (width % heads != 0) {
    throw ConfigError("encoder width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
}

template <typename T>
ExpertEncoderParams<T> init_encoder(const EncoderConfig& config, Rng& rng) {
  const std::size_t d = config.width;
  const std::size_t f = d * config.ffn_multiplier;
  ExpertEncoderParams<T> enc;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    const std::string p = "encoder.block" + std::to_string(b) + ".";
    AttentionBlock<T> blk{
        filled<T>(p + "norm1.gain", d, T{1}),   filled<T>(p + "norm1.bias", d, T{0}),
        uniform_matrix<T>(p + "query.weight", d, d, rng),
        filled<T>(p + "query.bias", d, T{0}),
        uniform_matrix<T>(p + "key.weight", d, d, rng),
        filled<T>(p + "key.bias", d, T{0}),
        uniform_matrix<T>(p + "value.weight", d, d, rng),
        filled<T>(p + "value.bias", d, T{0}),
        uniform_matrix<T>(p + "output.weight", d, d, rng),
        filled<T>(p + "output.bias", d, T{0}),
        filled<T>(p + "norm2.gain", d, T{1}),   filled<T>(p + "norm2.bias", d, T{0}),
        uniform_matrix<T>(p + "ffn.in.weight", d, f, rng),
        filled<T>(p + "ffn.in.bias", f, T{0}),
        uniform_matrix<T>(p + "ffn.out.weight", f, d, rng),
        filled<T>(p + "ffn.out.bias", d, T{0})};
    enc.blocks.push_back(std::move(blk));
  }
  enc.final_gain = filled<T>("encoder.final_norm.gain", d, T{1});
  enc.final_bias = filled<T>("encoder.final_norm.bias", d, T{0});
  return enc;
}

template <typename T>
BranchParams<T> init_branch(const EncoderConfig& config, std::size_t num_items, Rng& rng) {
  config.validate();
  if (num_items == 0) throw ConfigError("branch needs at least one item");
  const std::size_t d = config.width;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  BranchParams<T> br;
  br.item_embeddings = normal_matrix<T>("item_embeddings", num_items + 1, d, stddev, rng);
  for (std::size_t c = 0; c < d; ++c) br.item_embeddings.tensor(0, c) = T{0};
  br.position_embeddings = normal_matrix<T>("position_embeddings", config.max_len, d, stddev, rng);
  br.head.hidden_w = uniform_matrix<T>("head.hidden.weight", d, d, rng);
  br.head.hidden_b = filled<T>("head.hidden.bias", d, T{0});
  br.head.out_w = uniform_matrix<T>("head.output.weight", d, num_items, rng);
  br.head.out_b = filled<T>("head.output.bias", num_items, T{0});
  br.encoder = init_encoder<T>(config, rng);
  return br;
}

template <typename T>
Var<T> gnn_propagate(const SparseMatrix& norm_adjacency, const Var<T>& embeddings,
                     std::size_t depth) {
  Var<T> s = embeddings;
  for (std::size_t l = 0; l < depth; ++l) s = sparse_matmul(norm_adjacency, s);
  return s;
}

template <typename T>
BranchForward<T>::BranchForward(Tape<T>& tape, BranchParams<T>& branch,
                                const SparseMatrix& adjacency, const EncoderConfig& config)
    : tape_(&tape), config_(&config) {
  if (adjacency.rows != branch.item_embeddings.tensor.rows()) {
    throw DimensionError("adjacency has " + std::to_string(adjacency.rows) +
                         " rows but the item table has " +
                         std::to_string(branch.item_embeddings.tensor.rows()));
  }
  const Var<T> items = tape.leaf(branch.item_embeddings);
  // Token table is S + S_L.
  table_ = add(items, gnn_propagate(adjacency, items, config.gnn_depth));
  positions_ = tape.leaf(branch.position_embeddings);
  for (auto& b : branch.encoder.blocks) {
    blocks_.push_back({tape.leaf(b.norm1_gain), tape.leaf(b.norm1_bias), tape.leaf(b.query_w),
                       tape.leaf(b.query_b), tape.leaf(b.key_w), tape.leaf(b.key_b),
                       tape.leaf(b.value_w), tape.leaf(b.value_b), tape.leaf(b.out_w),
                       tape.leaf(b.out_b), tape.leaf(b.norm2_gain), tape.leaf(b.norm2_bias),
                       tape.leaf(b.ffn_in_w), tape.leaf(b.ffn_in_b), tape.leaf(b.ffn_out_w),
                       tape.leaf(b.ffn_out_b)});
  }
  final_gain_ = tape.leaf(branch.encoder.final_gain);
  final_bias_ = tape.leaf(branch.encoder.final_bias);
  head_hw_ = tape.leaf(branch.head.hidden_w);
  head_hb_ = tape.leaf(branch.head.hidden_b);
  head_ow_ = tape.leaf(branch.head.out_w);
  head_ob_ = tape.leaf(branch.head.out_b);
}

template <typename T>
Var<T> BranchForward<T>::states(std::span<const std::vector<ItemId>> prefixes,
                                ForwardContext& ctx) {
  return run(prefixes, ctx, false);
}

template <typename T>
Var<T> BranchForward<T>::run(std::span<const std::vector<ItemId>> prefixes, ForwardContext& ctx,
                             bool last_only) {
  const std::size_t len = config_->max_len;
  const std::size_t n = prefixes.size();
  if (n == 0) throw ContractError("encode: empty batch");
  std::vector<std::size_t> ids(n * len);
  std::vector<std::size_t> pos(n * len, 0);
  std::vector<std::uint8_t> valid(n * len, 0);
  std::vector<T> keep(n * len, T{0});
  for (std::size_t s = 0; s < n; ++s) {
    const auto& p = prefixes[s];
    if (p.size() != len) {
      throw DimensionError("encode: prefix of length " + std::to_string(p.size()) +
                           ", expected " + std::to_string(len));
    }
    std::size_t first = 0;
    while (first < len && p[first] == data::kPadding) ++first;
    if (first == len) throw ContractError("encode: all-padding prefix");
    for (std::size_t j = 0; j < len; ++j) {
      const std::size_t r = s * len + j;
      ids[r] = p[j];
      if (j >= first) {
        if (p[j] == data::kPadding) throw ContractError("encode: padding inside prefix");
        pos[r] = j - first;
        valid[r] = 1;
        keep[r] = T{1};
      }
    }
  }
  const std::size_t heads = config_->heads;
  const double drop = config_->dropout;
  Var<T> x = add(gather_rows(table_, ids, static_cast<long>(data::kPadding)),
                 gather_rows(positions_, pos));
  x = scale_rows(x, std::span<const T>(keep));
  std::vector<std::size_t> last(n);
  for (std::size_t s = 0; s < n; ++s) last[s] = s * len + len - 1;
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    auto& b = blocks_[bi];
    // Only the last position is read downstream of the final block, and the
    // last slot is never padding.
    const bool tail = last_only && bi + 1 == blocks_.size();
    Var<T> h = layer_norm(x, b.n1g, b.n1b);
    Var<T> k = add_bias(matmul(h, b.kw), b.kb);
    Var<T> v = add_bias(matmul(h, b.vw), b.vb);
    if (tail) {
      h = gather_rows(h, std::span<const std::size_t>(last));
      x = gather_rows(x, std::span<const std::size_t>(last));
    }
    Var<T> q = add_bias(matmul(h, b.qw), b.qb);
    Var<T> a = causal_attention(q, k, v, valid, len, heads, drop, ctx);
    x = add(x, add_bias(matmul(a, b.ow), b.ob));
    Var<T> h2 = layer_norm(x, b.n2g, b.n2b);
    Var<T> f = gelu(add_bias(matmul(h2, b.f1w), b.f1b));
    f = dropout(f, drop, ctx);
    x = add(x, add_bias(matmul(f, b.f2w), b.f2b));
    if (!tail) x = scale_rows(x, std::span<const T>(keep));
  }
  return layer_norm(x, final_gain_, final_bias_);
}

template <typename T>
Var<T> BranchForward<T>::encode_z(std::span<const std::vector<ItemId>> prefixes,
                                  ForwardContext& ctx) {
  return run(prefixes, ctx, true);
}

template <typename T>
Var<T> BranchForward<T>::head(const Var<T>& z) {
  const Var<T> h = gelu(add_bias(matmul(z, head_hw_), head_hb_));
  return add_bias(matmul(h, head_ow_), head_ob_);
}

template <typename T>
EncodedBatch<T> BranchForward<T>::encode(std::span<const std::vector<ItemId>> prefixes,
                                         ForwardContext& ctx) {
  Var<T> z = encode_z(prefixes, ctx);
  return {z, head(z)};
}

template <typename T>
EncodedBatch<T> encode(Tape<T>& tape, std::span<const std::vector<ItemId>> prefixes,
                       BranchParams<T>& branch, const SparseMatrix& adjacency,
                       const EncoderConfig& config, ForwardContext& ctx) {
  BranchForward<T> fwd(tape, branch, adjacency, config);
  return fwd.encode(prefixes, ctx);
}

template <typename T>
Var<T> rec_loss(const Var<T>& logits, std::span<const ItemId> targets) {
  std::vector<std::size_t> cls(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == data::kPadding) throw IndexError("rec_loss: padding target");
    cls[i] = targets[i] - 1;
  }
  return cross_entropy(logits, std::span<const std::size_t>(cls));
}

template <typename T>
Var<T> contrastive_loss(const Var<T>& z, const Var<T>& z_aug, double temperature) {
  if (z.shape() != z_aug.shape()) {
    throw DimensionError("contrastive_loss: " + shape_string(z.shape()) + " vs " +
                         shape_string(z_aug.shape()));
  }
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be positive");
  const std::size_t n = z.rows();
  if (n < 2) {
    log_warning("contrastive_loss: batch of " + std::to_string(n) +
                " has no negatives; returning 0");
    return z.tape()->constant(Tensor<T>::scalar(T{0}));
  }
  const Var<T> sim = scale(matmul(z, transpose(z_aug)), static_cast<T>(1.0 / temperature));
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  const std::span<const std::size_t> d(diag);
  return scale(add(cross_entropy(sim, d), cross_entropy(transpose(sim), d)), T(0.5));
}

#define FMOE_INSTANTIATE_EXPERT(T)                                                         \
  template ExpertEncoderParams<T> init_encoder<T>(const EncoderConfig&, Rng&);             \
  template BranchParams<T> init_branch<T>(const EncoderConfig&, std::size_t, Rng&);        \
  template Var<T> gnn_propagate<T>(const SparseMatrix&, const Var<T>&, std::size_t);       \
  template class BranchForward<T>;                                                         \
  template EncodedBatch<T> encode<T>(Tape<T>&, std::span<const std::vector<ItemId>>,       \
                                     BranchParams<T>&, const SparseMatrix&,                \
                                     const EncoderConfig&, ForwardContext&);               \
  template Var<T> rec_loss<T>(const Var<T>&, std::span<const ItemId>);                     \
  template Var<T> contrastive_loss<T>(const Var<T>&, const Var<T>&, double);

FMOE_INSTANTIATE_EXPERT(float)
FMOE_INSTANTIATE_EXPERT(double)

}  // namespace fmoe::expert
