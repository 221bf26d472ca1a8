// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "fmoe/errors.hpp"
#include "fmoe/federation/checkpoint.hpp"
#include "fmoe/federation/client.hpp"
#include "fmoe/federation/runner.hpp"
#include "fmoe/federation/server.hpp"
#include "support/fixtures.hpp"

using namespace fmoe;
using namespace fmoe::federation;
using fmoe::testing::raw_bytes;
using fmoe::testing::small_encoder;
using fmoe::testing::small_scenario;
using fmoe::testing::small_train;

namespace {

ExpertCheckpoint random_checkpoint(Rng& rng, float scale = 1.0f) {
  ExpertCheckpoint ck;
  ck.entries.push_back({"encoder.a", Shape{2, 3}, {}});
  ck.entries.push_back({"encoder.b", Shape{4}, {}});
  for (auto& e : ck.entries) {
    e.values.resize(shape_size(e.shape));
    for (auto& v : e.values) v = scale * static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  return ck;
}

}  // namespace

TEST_CASE("checkpoint serialization round-trips byte for byte") {
  Rng rng(1);
  const auto ck = random_checkpoint(rng);
  const auto bytes = serialize(ck);
  const auto back = deserialize(bytes);
  CHECK(back == ck);
  CHECK(serialize(back) == bytes);
  CHECK(bytes.substr(0, 4) == "FMCK");
  CHECK(fingerprint(back) == fingerprint(ck));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad), FormatError);
  CHECK_THROWS_AS(deserialize(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(deserialize(bytes + "z"), FormatError);
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(deserialize(version), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "fmoe_test_ckpt.bin";
  write_checkpoint(path, ck);
  CHECK(read_checkpoint(path) == ck);
}

TEST_CASE("encoder checkpoints load only into matching encoders") {
  Rng rng(2);
  const auto enc = small_encoder();
  auto a = expert::init_encoder<float>(enc, rng);
  auto b = expert::init_encoder<float>(enc, rng);
  const auto ck = make_checkpoint(a);
  CHECK(ck.find("encoder.final_norm.gain") != nullptr);
  CHECK(ck.find("item_embeddings") == nullptr);
  load_checkpoint(ck, b);
  CHECK(make_checkpoint(b) == ck);
  auto wide = enc;
  wide.width = 16;
  auto c = expert::init_encoder<float>(wide, rng);
  CHECK_THROWS_AS(load_checkpoint(ck, c), FormatError);
}

TEST_CASE("FedAvg aggregation is the elementwise mean") {
  Rng rng(3);
  std::vector<ExpertCheckpoint> cks;
  for (int i = 0; i < 4; ++i) cks.push_back(random_checkpoint(rng));
  const auto avg = fedavg_aggregate(cks);
  for (std::size_t e = 0; e < avg.entries.size(); ++e) {
    for (std::size_t i = 0; i < avg.entries[e].values.size(); ++i) {
      double s = 0.0;
      for (const auto& c : cks) s += c.entries[e].values[i];
      CHECK(avg.entries[e].values[i] == doctest::Approx(s / 4.0).epsilon(1e-7));
    }
  }
  const std::vector<ExpertCheckpoint> same(3, cks[0]);
  CHECK(fedavg_aggregate(same) == cks[0]);

  CHECK_THROWS_AS(fedavg_aggregate(std::vector<ExpertCheckpoint>{}), AggregationError);
  auto renamed = cks[1];
  renamed.entries[0].name = "encoder.other";
  CHECK_THROWS_AS(fedavg_aggregate(std::vector<ExpertCheckpoint>{cks[0], renamed}),
                  AggregationError);
  auto reshaped = cks[1];
  reshaped.entries[0].shape = Shape{3, 2};
  CHECK_THROWS_AS(fedavg_aggregate(std::vector<ExpertCheckpoint>{cks[0], reshaped}),
                  AggregationError);
}

TEST_CASE("server cache commits at the barrier") {
  Rng rng(4);
  ServerCache cache;
  std::vector<std::string> seen;
  cache.set_observer([&](const std::string& d, const ExpertCheckpoint&) { seen.push_back(d); });
  const auto a = random_checkpoint(rng), b = random_checkpoint(rng);
  cache.upload("x", a);
  CHECK(cache.staged() == 1);
  CHECK_FALSE(cache.contains("x"));
  CHECK_THROWS_AS(cache.at("x"), ContractError);
  cache.commit();
  CHECK(cache.round() == 1);
  CHECK(cache.at("x") == a);
  auto snap = cache.snapshot();
  cache.upload("x", b);
  cache.commit();
  CHECK(cache.at("x") == b);
  CHECK(snap.at("x") == a);
  CHECK(seen == std::vector<std::string>{"x", "x"});

  cache.upload("x", a);
  cache.upload("y", b);
  cache.commit_average();
  CHECK(cache.at("x") == cache.at("y"));
  CHECK(cache.at("x") == fedavg_aggregate(std::vector<ExpertCheckpoint>{a, b}));
}

TEST_CASE("train config validation and mode names") {
  for (auto m : {Mode::kFmoe, Mode::kLocalOnly, Mode::kFedAvg, Mode::kNoGate, Mode::kNoFreeze,
                 Mode::kDropExpert}) {
    CHECK(parse_mode(mode_name(m)) == m);
  }
  CHECK_THROWS_AS(parse_mode("bogus"), ConfigError);
  auto t = small_train(Mode::kFmoe);
  CHECK_NOTHROW(t.validate());
  t.adam.learning_rate = 0.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = small_train(Mode::kFmoe);
  t.weights.moe = -1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = small_train(Mode::kFmoe);
  t.dropped_experts = {"d1"};
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.mode = Mode::kDropExpert;
  CHECK_NOTHROW(t.validate());
  t.drop_target = "d1";
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = small_train(Mode::kDropExpert);
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("expert sources per mode") {
  const auto sc = small_scenario(5);
  using V = std::vector<std::string>;
  auto src = resolve_sources(sc, small_train(Mode::kFmoe));
  CHECK(src[0] == V{"d1", "d2"});
  CHECK(src[1] == V{"d0", "d2"});
  CHECK(resolve_sources(sc, small_train(Mode::kLocalOnly))[0].empty());
  CHECK(resolve_sources(sc, small_train(Mode::kFedAvg))[2].empty());

  auto drop = small_train(Mode::kDropExpert);
  drop.dropped_experts = {"d1"};
  src = resolve_sources(sc, drop);
  CHECK(src[0] == V{"d2"});
  CHECK(src[1] == V{"d0", "d2"});
  CHECK(src[2] == V{"d0"});
  drop.drop_target = "d0";
  src = resolve_sources(sc, drop);
  CHECK(src[0] == V{"d2"});
  CHECK(src[2] == V{"d0", "d1"});
  drop.dropped_experts = {"nope"};
  CHECK_THROWS_AS(resolve_sources(sc, drop), ConfigError);
}

TEST_CASE("global encoders stay frozen in fmoe and move without freezing") {
  const auto sc = small_scenario(6);
  for (auto mode : {Mode::kFmoe, Mode::kNoFreeze}) {
    Federation<float> fed(sc, small_encoder(), small_train(mode));
    const auto snap = fed.cache().snapshot();
    auto& client = fed.clients()[0];
    client_update(client, snap, 0);
    bool all_equal = true;
    for (const auto& g : client.globals()) {
      all_equal &= make_checkpoint(g.params.encoder) == snap.at(g.source);
    }
    CHECK(all_equal == (mode == Mode::kFmoe));
    // Adapters train in both modes.
    Federation<float> fresh(sc, small_encoder(), small_train(mode));
    CHECK(raw_bytes(fresh.clients()[0].globals()[0].params.item_embeddings) !=
          raw_bytes(client.globals()[0].params.item_embeddings));
  }
}

TEST_CASE("a step on the fused loss alone moves only the gate") {
  const auto sc = small_scenario(7);
  Federation<double> fed(sc, small_encoder(), small_train(Mode::kFmoe));
  auto& c = fed.clients()[1];
  c.sync(fed.cache().snapshot());
  std::vector<std::pair<std::string, std::vector<unsigned char>>> before;
  c.for_each_parameter([&](const std::string& k, Parameter<double>& p) {
    before.emplace_back(k, raw_bytes(p));
  });
  const auto& train = c.data().train;
  std::vector<std::vector<data::ItemId>> pre;
  std::vector<data::ItemId> tgt;
  for (std::size_t i = 0; i < 16; ++i) {
    pre.push_back(train[i].prefix);
    tgt.push_back(train[i].target);
  }
  Rng rng(1);
  Tape<double> tape;
  ForwardContext ctx{true, &rng};
  c.clear_grads();
  auto g = c.build_losses(tape, pre, pre, tgt, ctx, Objective::kFull);
  const auto it = std::find_if(g.components.begin(), g.components.end(),
                               [](const auto& p) { return p.first == "moe.rec"; });
  REQUIRE(it != g.components.end());
  tape.backward(it->second);
  c.for_each_parameter([&](const std::string& k, Parameter<double>& p) { c.optimizer().step(k, p); });
  std::size_t i = 0, changed_gate = 0;
  c.for_each_parameter([&](const std::string& k, Parameter<double>& p) {
    const bool changed = raw_bytes(p) != before[i++].second;
    if (k.rfind("gate.", 0) == 0) {
      changed_gate += changed;
    } else {
      INFO(k);
      CHECK_FALSE(changed);
    }
  });
  CHECK(changed_gate > 0);
}

TEST_CASE("loss components and zero weights") {
  const auto sc = small_scenario(8);
  auto cfg = small_train(Mode::kFmoe);
  cfg.weights = {0.0, 0.0, 0.0, 0.0, 0.0};
  Federation<double> fed(sc, small_encoder(), cfg);
  auto& c = fed.clients()[0];
  const auto& s = c.data().train;
  std::vector<std::vector<data::ItemId>> pre{s[0].prefix, s[1].prefix};
  std::vector<data::ItemId> tgt{s[0].target, s[1].target};
  Tape<double> tape;
  ForwardContext ctx;
  const auto g = c.build_losses(tape, pre, pre, tgt, ctx, Objective::kFull);
  std::set<std::string> names;
  for (const auto& [n, v] : g.components) names.insert(n);
  CHECK(names == std::set<std::string>{"local.rec", "local.con", "d1.rec", "d1.con", "d2.rec",
                                       "d2.con", "moe.rec"});
  CHECK(g.total.value().item() == 0.0);
  Tape<double> t2;
  const auto local = c.build_losses(t2, pre, pre, tgt, ctx, Objective::kLocal);
  CHECK(local.components.size() == 2);
  CHECK_FALSE(local.gate_weights.valid());
}

TEST_CASE("only encoder parameters are ever uploaded") {
  const auto sc = small_scenario(9);
  for (auto mode : {Mode::kFmoe, Mode::kFedAvg, Mode::kNoFreeze}) {
    Federation<float> fed(sc, small_encoder(), small_train(mode));
    std::size_t uploads = 0;
    fed.cache().set_observer([&](const std::string&, const ExpertCheckpoint& ck) {
      ++uploads;
      for (const auto& e : ck.entries) {
        INFO(e.name);
        CHECK(e.name.rfind("encoder.", 0) == 0);
      }
    });
    fed.run();
    CHECK(uploads == 6);
  }
}

TEST_CASE("local-only runs never touch the cache") {
  const auto sc = small_scenario(10);
  Federation<float> fed(sc, small_encoder(), small_train(Mode::kLocalOnly));
  std::size_t uploads = 0;
  fed.cache().set_observer([&](const std::string&, const ExpertCheckpoint&) { ++uploads; });
  const auto r = fed.run();
  CHECK(uploads == 0);
  CHECK(fed.cache().size() == 0);
  CHECK(r.history.size() == 2);
  CHECK(r.history[0].gate_weights[0].empty());
}

TEST_CASE("FedAvg clients share one encoder after every round") {
  const auto sc = small_scenario(11);
  Federation<float> fed(sc, small_encoder(), small_train(Mode::kFedAvg));
  const auto r = fed.run();
  const auto& fp = r.history.back().cache_fingerprints;
  CHECK(fp[0] == fp[1]);
  CHECK(fp[1] == fp[2]);
  const auto shared = fed.clients()[0].local_checkpoint();
  for (auto& c : fed.clients()) CHECK(c.local_checkpoint() == shared);
}

TEST_CASE("same seed gives a bit-identical history") {
  const auto sc = small_scenario(12);
  auto cfg = small_train(Mode::kFmoe, 21);
  const auto a = run_federation<float>(sc, small_encoder(), cfg);
  const auto b = run_federation<float>(sc, small_encoder(), cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t t = 0; t < a.history.size(); ++t) {
    CHECK(a.history[t].valid.average.mrr == b.history[t].valid.average.mrr);
    CHECK(a.history[t].test.average.ndcg_at_10 == b.history[t].test.average.ndcg_at_10);
    CHECK(a.history[t].cache_fingerprints == b.history[t].cache_fingerprints);
    CHECK(a.history[t].gate_weights == b.history[t].gate_weights);
  }
  cfg.seed = 22;
  const auto c = run_federation<float>(sc, small_encoder(), cfg);
  CHECK(c.history.back().cache_fingerprints != a.history.back().cache_fingerprints);
}

TEST_CASE("client order and threading do not change the round result") {
  const auto sc = small_scenario(13);
  auto seq_cfg = small_train(Mode::kFmoe);
  auto par_cfg = seq_cfg;
  par_cfg.parallel_clients = true;
  Federation<float> seq(sc, small_encoder(), seq_cfg);
  Federation<float> par(sc, small_encoder(), par_cfg);
  Federation<float> rev(sc, small_encoder(), seq_cfg);
  const std::vector<std::size_t> backwards{2, 1, 0};
  for (std::size_t t = 0; t < 2; ++t) {
    seq.run_round(t);
    par.run_round(t);
    rev.run_round(t, backwards);
    CHECK(seq.cache().snapshot() == par.cache().snapshot());
    CHECK(seq.cache().snapshot() == rev.cache().snapshot());
  }
  const std::vector<std::size_t> partial{0, 1};
  CHECK_THROWS_AS(seq.run_round(2, partial), ContractError);
}

TEST_CASE("best round tracking and early stopping") {
  const auto sc = small_scenario(14);
  auto cfg = small_train(Mode::kLocalOnly);
  cfg.rounds = 6;
  cfg.patience = 1;
  cfg.adam.learning_rate = 1e-7;  // no real progress, so the run stops early
  Federation<float> fed(sc, small_encoder(), cfg);
  const auto r = fed.run();
  double best = -1.0;
  std::size_t idx = 0;
  for (std::size_t t = 0; t < r.history.size(); ++t) {
    if (r.history[t].valid.average.mrr > best) {
      best = r.history[t].valid.average.mrr;
      idx = t;
    }
  }
  CHECK(r.best_index == idx);
  CHECK(r.history.size() <= 6);
  if (r.history.size() < 6) CHECK(r.early_stopped);
  CHECK(fed.best_states().size() == 3);
}

TEST_CASE("state export and import reproduce evaluation") {
  const auto sc = small_scenario(15);
  Federation<float> fed(sc, small_encoder(), small_train(Mode::kFmoe));
  fed.run();
  const auto ref = fed.evaluate(0);
  Federation<float> other(sc, small_encoder(), small_train(Mode::kFmoe, 99));
  for (std::size_t k = 0; k < 3; ++k) other.clients()[k].import_state(fed.best_states()[k]);
  // best_states_ is the best round, which is not necessarily the last.
  Federation<float> again(sc, small_encoder(), small_train(Mode::kFmoe, 99));
  for (std::size_t k = 0; k < 3; ++k) {
    again.clients()[k].import_state(fed.clients()[k].export_state());
  }
  CHECK(again.evaluate(0).test.average.mrr == ref.test.average.mrr);
  auto bad = fed.clients()[0].export_state();
  bad.entries.pop_back();
  CHECK_THROWS_AS(other.clients()[0].import_state(bad), FormatError);
}

TEST_CASE("drop_expert withholds the dropped checkpoint") {
  const auto sc = small_scenario(16);
  auto cfg = small_train(Mode::kDropExpert);
  cfg.dropped_experts = {"d1"};
  cfg.drop_target = "d0";
  Federation<float> fed(sc, small_encoder(), cfg);
  CHECK(fed.clients()[0].experts() == 2);
  CHECK(fed.clients()[2].experts() == 3);
  const auto r = fed.run();
  CHECK(r.history.back().gate_weights[0].size() == 2);
}

TEST_CASE("two-phase schedule syncs once and labels the run") {
  const auto sc = small_scenario(17);
  Federation<float> fed(sc, small_encoder(), small_train(Mode::kFmoe));
  std::size_t uploads = 0;
  fed.cache().set_observer([&](const std::string&, const ExpertCheckpoint&) { ++uploads; });
  const auto start = fed.cache().round();
  const auto r = fed.run_two_phase(1);
  CHECK(r.mode == "two_phase_1");
  CHECK(uploads == 3);
  CHECK(fed.cache().round() == start + 1);
  const auto snap = fed.cache().snapshot();
  for (auto& c : fed.clients()) {
    for (const auto& g : c.globals()) CHECK(make_checkpoint(g.params.encoder) == snap.at(g.source));
  }
  Federation<float> local(sc, small_encoder(), small_train(Mode::kLocalOnly));
  CHECK_THROWS_AS(local.run_two_phase(1), ConfigError);
}

TEST_CASE("no_gate mixes experts uniformly") {
  const auto sc = small_scenario(18);
  Federation<float> fed(sc, small_encoder(), small_train(Mode::kNoGate));
  const auto r = fed.run();
  for (const auto& w : r.history.back().gate_weights) {
    for (auto v : w) CHECK(v == doctest::Approx(1.0 / 3.0));
  }
}
