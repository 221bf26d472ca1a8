// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "fmoe/data/dataset.hpp"
#include "fmoe/errors.hpp"
#include "fmoe/expert/expert.hpp"
#include "support/gradcheck.hpp"

using namespace fmoe;
using namespace fmoe::expert;
using data::ItemId;

namespace {

EncoderConfig tiny_config(std::size_t max_len = 6) {
  EncoderConfig c;
  c.width = 8;
  c.blocks = 1;
  c.heads = 2;
  c.ffn_multiplier = 2;
  c.gnn_depth = 2;
  c.max_len = max_len;
  c.dropout = 0.0;
  return c;
}

SparseMatrix tiny_graph(std::size_t items) {
  std::vector<std::vector<ItemId>> seqs;
  Rng rng(5);
  for (int s = 0; s < 12; ++s) {
    std::vector<ItemId> seq;
    for (int t = 0; t < 5; ++t) seq.push_back(static_cast<ItemId>(1 + rng.below(items)));
    seqs.push_back(seq);
  }
  return data::build_adjacency(seqs, items);
}

std::vector<std::vector<ItemId>> batch() {
  return {{0, 0, 3, 5, 1, 2}, {1, 2, 3, 4, 5, 6}, {0, 0, 0, 0, 0, 9}, {0, 7, 7, 2, 8, 4}};
}

}  // namespace

TEST_CASE("branch initialization shapes and padding row") {
  Rng rng(1);
  const auto cfg = tiny_config();
  const auto br = init_branch<double>(cfg, 20, rng);
  CHECK(br.item_embeddings.tensor.shape() == Shape{21, 8});
  CHECK(br.position_embeddings.tensor.shape() == Shape{6, 8});
  CHECK(br.head.out_w.tensor.shape() == Shape{8, 20});
  CHECK(br.num_items() == 20);
  for (std::size_t c = 0; c < 8; ++c) CHECK(br.item_embeddings.tensor(0, c) == 0.0);
  std::set<std::string> names;
  std::size_t count = 0;
  br.encoder.for_each([&](const Parameter<double>& p) {
    names.insert(p.name);
    ++count;
  });
  CHECK(names.size() == count);
  CHECK(count == 18);
  CHECK(names.count("encoder.block0.query.weight") == 1);
}

TEST_CASE("encoder config validation") {
  auto c = tiny_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.blocks = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("graph propagation matches a dense oracle") {
  const std::size_t n = 12;
  const auto a = tiny_graph(n);
  Rng rng(2);
  Parameter<double> emb{"e", Tensor<double>(Shape{n + 1, 3}), true};
  for (auto& v : emb.tensor.values()) v = rng.normal();
  // Dense A^2 * S.
  std::vector<std::vector<double>> dense(n + 1, std::vector<double>(n + 1, 0.0));
  for (std::size_t r = 0; r <= n; ++r) {
    for (std::size_t k = a.row_ptr[r]; k < a.row_ptr[r + 1]; ++k) dense[r][a.col_idx[k]] = a.values[k];
  }
  auto apply = [&](const std::vector<std::vector<double>>& s) {
    std::vector<std::vector<double>> out(n + 1, std::vector<double>(3, 0.0));
    for (std::size_t r = 0; r <= n; ++r)
      for (std::size_t c = 0; c <= n; ++c)
        for (std::size_t j = 0; j < 3; ++j) out[r][j] += dense[r][c] * s[c][j];
    return out;
  };
  std::vector<std::vector<double>> s(n + 1, std::vector<double>(3));
  for (std::size_t r = 0; r <= n; ++r)
    for (std::size_t j = 0; j < 3; ++j) s[r][j] = emb.tensor(r, j);
  const auto expect = apply(apply(s));

  Tape<double> tape;
  const auto x = tape.leaf(emb);
  CHECK(gnn_propagate(a, x, 0).value().values()[5] == emb.tensor.values()[5]);
  const auto got = gnn_propagate(a, x, 2).value();
  for (std::size_t r = 0; r <= n; ++r)
    for (std::size_t j = 0; j < 3; ++j) CHECK(got(r, j) == doctest::Approx(expect[r][j]).epsilon(1e-12));
}

TEST_CASE("a position ignores later items") {
  Rng rng(3);
  const auto cfg = tiny_config();
  auto br = init_branch<double>(cfg, 20, rng);
  const auto graph = tiny_graph(20);
  ForwardContext ctx;
  std::vector<std::vector<ItemId>> p{{0, 1, 2, 3, 4, 5}};
  auto q = p;
  q[0][4] = 11;
  q[0][5] = 17;
  Tape<double> tape(false);
  BranchForward<double> fwd(tape, br, graph, cfg);
  const auto a = fwd.states(p, ctx).value();
  const auto b = fwd.states(q, ctx).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(a(r, c) == doctest::Approx(b(r, c)).epsilon(1e-12));
  double diff = 0.0;
  for (std::size_t c = 0; c < 8; ++c) diff += std::abs(a(5, c) - b(5, c));
  CHECK(diff > 1e-6);
}

TEST_CASE("last-position encoding equals the last rows of the full states") {
  Rng rng(4);
  auto cfg = tiny_config();
  cfg.blocks = 2;
  auto br = init_branch<double>(cfg, 20, rng);
  const auto graph = tiny_graph(20);
  ForwardContext ctx;
  const auto pre = batch();
  Tape<double> tape(false);
  BranchForward<double> fwd(tape, br, graph, cfg);
  const auto all = fwd.states(pre, ctx).value();
  const auto z = fwd.encode_z(pre, ctx).value();
  REQUIRE(z.shape() == Shape{4, 8});
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t c = 0; c < 8; ++c)
      CHECK(z(s, c) == doctest::Approx(all(s * 6 + 5, c)).epsilon(1e-12));
}

TEST_CASE("left padding does not change the representation") {
  // Positions count from the first real item and padded slots are masked,
  // so the same history under a longer window encodes identically.
  Rng rng(6);
  const auto wide = tiny_config(7);
  auto br7 = init_branch<double>(wide, 20, rng);
  const auto narrow = tiny_config(4);
  auto br4 = br7;
  Tensor<double> pos(Shape{4, 8});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) pos(r, c) = br7.position_embeddings.tensor(r, c);
  br4.position_embeddings.tensor = pos;
  const auto graph = tiny_graph(20);
  ForwardContext ctx;
  Tape<double> tape(false);
  const std::vector<std::vector<ItemId>> short_p{{0, 4, 9, 2}};
  const std::vector<std::vector<ItemId>> long_p{{0, 0, 0, 0, 4, 9, 2}};
  const auto a = encode(tape, short_p, br4, graph, narrow, ctx).z.value();
  const auto b = encode(tape, long_p, br7, graph, wide, ctx).z.value();
  for (std::size_t c = 0; c < 8; ++c) CHECK(a(0, c) == doctest::Approx(b(0, c)).epsilon(1e-12));
}

TEST_CASE("malformed prefixes are rejected") {
  Rng rng(7);
  const auto cfg = tiny_config();
  auto br = init_branch<double>(cfg, 20, rng);
  const auto graph = tiny_graph(20);
  ForwardContext ctx;
  Tape<double> tape(false);
  BranchForward<double> fwd(tape, br, graph, cfg);
  const std::vector<std::vector<ItemId>> wrong_len{{1, 2, 3}};
  CHECK_THROWS_AS(fwd.encode_z(wrong_len, ctx), DimensionError);
  const std::vector<std::vector<ItemId>> all_pad{{0, 0, 0, 0, 0, 0}};
  CHECK_THROWS_AS(fwd.encode_z(all_pad, ctx), ContractError);
  CHECK_THROWS_AS(BranchForward<double>(tape, br, tiny_graph(19), cfg), DimensionError);
}

TEST_CASE("dropout is reproducible from the stream and inactive in eval") {
  Rng rng(8);
  auto cfg = tiny_config();
  cfg.dropout = 0.3;
  auto br = init_branch<double>(cfg, 20, rng);
  const auto graph = tiny_graph(20);
  const auto pre = batch();
  auto run = [&](bool train, std::uint64_t seed) {
    Rng r(seed);
    ForwardContext ctx{train, &r};
    Tape<double> tape(false);
    return encode(tape, pre, br, graph, cfg, ctx).z.value();
  };
  const auto a = run(true, 1), b = run(true, 1), c = run(true, 2);
  const auto e1 = run(false, 1), e2 = run(false, 2);
  bool same_ab = true, same_ac = true, same_e = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same_ab &= a[i] == b[i];
    same_ac &= a[i] == c[i];
    same_e &= e1[i] == e2[i];
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);
  CHECK(same_e);
}

TEST_CASE("reconstruction loss is cross entropy over 1-based targets") {
  Tape<double> tape;
  Tensor<double> logits(Shape{2, 3}, std::vector<double>{1.0, 2.0, 3.0, 0.0, 0.0, 0.0});
  const auto l = tape.constant(logits);
  const std::vector<ItemId> targets{3, 1};
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  const double expect = 0.5 * ((lse - 3.0) + std::log(3.0));
  CHECK(rec_loss(l, targets).value().item() == doctest::Approx(expect).epsilon(1e-12));
  const std::vector<ItemId> pad{0, 1};
  CHECK_THROWS_AS(rec_loss(l, pad), IndexError);
}

TEST_CASE("contrastive loss matches a direct evaluation") {
  Rng rng(9);
  const std::size_t n = 4, d = 3;
  Tensor<double> z(Shape{n, d}), za(Shape{n, d});
  for (auto& v : z.values()) v = rng.normal();
  for (auto& v : za.values()) v = rng.normal();
  const double tau = 0.7;
  auto sim = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += z(i, c) * za(j, c);
    return s / tau;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += std::exp(sim(i, j));
      col += std::exp(sim(j, i));
    }
    total += (std::log(row) - sim(i, i)) + (std::log(col) - sim(i, i));
  }
  const double expect = total / (2.0 * n);
  Tape<double> tape;
  const auto got = contrastive_loss(tape.constant(z), tape.constant(za), tau).value().item();
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));

  Tensor<double> one(Shape{1, d}, 1.0);
  CHECK(contrastive_loss(tape.constant(one), tape.constant(one), tau).value().item() == 0.0);
  CHECK_THROWS_AS(contrastive_loss(tape.constant(z), tape.constant(one), tau), DimensionError);
}

TEST_CASE("expert loss gradients match finite differences") {
  Rng rng(10);
  auto cfg = tiny_config();
  auto br = init_branch<double>(cfg, 20, rng);
  const auto graph = tiny_graph(20);
  const auto pre = batch();
  std::vector<std::vector<ItemId>> aug = pre;
  std::swap(aug[1][2], aug[1][3]);
  std::swap(aug[3][3], aug[3][4]);
  const std::vector<ItemId> targets{4, 7, 1, 20};
  std::vector<std::vector<ItemId>> both = pre;
  both.insert(both.end(), aug.begin(), aug.end());
  auto loss = [&](bool backward) {
    Tape<double> tape;
    ForwardContext ctx;
    BranchForward<double> fwd(tape, br, graph, cfg);
    const auto all = fwd.encode_z(both, ctx);
    const std::vector<std::size_t> first{0, 1, 2, 3}, second{4, 5, 6, 7};
    const auto z = gather_rows(all, std::span<const std::size_t>(first));
    const auto za = gather_rows(all, std::span<const std::size_t>(second));
    const auto total = add(rec_loss(fwd.head(z), targets), contrastive_loss(z, za, 1.0));
    if (backward) {
      br.for_each([](Parameter<double>& p) { p.tensor.clear_grad(); });
      tape.backward(total);
    }
    return total.value().item();
  };
  loss(true);
  std::vector<Parameter<double>*> params;
  br.for_each([&](Parameter<double>& p) { params.push_back(&p); });
  const auto r = fmoe::testing::check_gradients(params, [&] { return loss(false); }, 1e-5, 1e-6);
  INFO("worst " << r.worst);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.checked > 500);
}

TEST_CASE("a frozen encoder receives no gradient while embeddings do") {
  Rng rng(11);
  const auto cfg = tiny_config();
  auto br = init_branch<double>(cfg, 20, rng);
  br.encoder.set_trainable(false);
  const auto graph = tiny_graph(20);
  const auto pre = batch();
  Tape<double> tape;
  ForwardContext ctx;
  const auto enc = encode(tape, pre, br, graph, cfg, ctx);
  const std::vector<ItemId> targets{1, 2, 3, 4};
  tape.backward(rec_loss(enc.logits, targets));
  br.encoder.for_each([](const Parameter<double>& p) { CHECK_FALSE(p.tensor.has_grad()); });
  CHECK(br.item_embeddings.tensor.has_grad());
  CHECK(br.head.out_w.tensor.has_grad());
}
