// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fmoe/errors.hpp"
#include "fmoe/moe/gate.hpp"
#include "support/gradcheck.hpp"

using namespace fmoe;
using namespace fmoe::moe;

namespace {

Parameter<double> random_param(std::string name, std::size_t r, std::size_t c, Rng& rng) {
  Tensor<double> t(Shape{r, c});
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return {std::move(name), std::move(t), true};
}

}  // namespace

TEST_CASE("a fresh gate is uniform") {
  Rng rng(1);
  auto gate = init_gate<double>(3, 4, 0, rng);
  Tape<double> tape;
  std::vector<Var<double>> zs;
  for (int e = 0; e < 3; ++e) {
    Tensor<double> z(Shape{5, 4});
    for (auto& v : z.values()) v = rng.normal();
    zs.push_back(tape.constant(z));
  }
  const auto w = gate_forward<double>(tape, gate, zs).value();
  REQUIRE(w.shape() == Shape{5, 3});
  for (auto v : w.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
  const auto u = uniform_gate<double>(tape, 5, 3).value();
  for (auto v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("gate weights are a softmax of a linear map of the concatenation") {
  Rng rng(2);
  auto gate = init_gate<double>(2, 3, 0, rng);
  for (auto& v : gate.weight.tensor.values()) v = rng.uniform(-1.0, 1.0);
  for (auto& v : gate.bias.tensor.values()) v = rng.uniform(-1.0, 1.0);
  Tensor<double> z0(Shape{1, 3}, std::vector<double>{0.5, -1.0, 2.0});
  Tensor<double> z1(Shape{1, 3}, std::vector<double>{1.0, 0.0, -0.5});
  std::vector<double> cat{0.5, -1.0, 2.0, 1.0, 0.0, -0.5};
  double logit[2];
  for (int e = 0; e < 2; ++e) {
    logit[e] = gate.bias.tensor[e];
    for (int i = 0; i < 6; ++i) logit[e] += cat[i] * gate.weight.tensor(i, e);
  }
  const double p0 = 1.0 / (1.0 + std::exp(logit[1] - logit[0]));
  Tape<double> tape;
  std::vector<Var<double>> zs{tape.constant(z0), tape.constant(z1)};
  const auto w = gate_forward<double>(tape, gate, zs).value();
  CHECK(w(0, 0) == doctest::Approx(p0).epsilon(1e-12));
  CHECK(w(0, 1) == doctest::Approx(1.0 - p0).epsilon(1e-12));
}

TEST_CASE("gate gradients stop at the expert representations") {
  Rng rng(3);
  auto gate = init_gate<double>(2, 3, 0, rng);
  auto z0 = random_param("z0", 4, 3, rng);
  auto z1 = random_param("z1", 4, 3, rng);
  Tape<double> tape;
  std::vector<Var<double>> zs{tape.leaf(z0), tape.leaf(z1)};
  const auto w = gate_forward<double>(tape, gate, zs);
  Tensor<double> r(Shape{4, 2}, std::vector<double>{1, -2, 0.5, 3, -1, 1, 2, 0});
  tape.backward(sum(mul(w, tape.constant(r))));
  CHECK_FALSE(z0.tensor.has_grad());
  CHECK_FALSE(z1.tensor.has_grad());
  CHECK(gate.weight.tensor.has_grad());
}

TEST_CASE("fusion is a convex combination of expert distributions") {
  Rng rng(4);
  Tape<double> tape;
  std::vector<Var<double>> dists;
  std::vector<Tensor<double>> raw;
  for (int e = 0; e < 3; ++e) {
    Tensor<double> l(Shape{2, 5});
    for (auto& v : l.values()) v = rng.normal();
    dists.push_back(expert_distribution(tape.constant(l)));
    raw.push_back(dists.back().value());
  }
  for (const auto& d : raw) {
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += d(r, c);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  Tensor<double> g(Shape{2, 3}, std::vector<double>{0.2, 0.3, 0.5, 1.0, 0.0, 0.0});
  const auto out = fuse<double>(dists, tape.constant(g));
  const auto m = out.mixture.value();
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      const double expect = g(r, 0) * raw[0](r, c) + g(r, 1) * raw[1](r, c) + g(r, 2) * raw[2](r, c);
      CHECK(m(r, c) == doctest::Approx(expect).epsilon(1e-12));
      s += m(r, c);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // A one-hot gate recovers that expert's distribution exactly.
  for (std::size_t c = 0; c < 5; ++c) CHECK(m(1, c) == doctest::Approx(raw[0](1, c)));
}

TEST_CASE("moe loss is the floored negative log of the mixture") {
  Tape<double> tape;
  Tensor<double> a(Shape{2, 2}, std::vector<double>{0.9, 0.1, 0.0, 1.0});
  Tensor<double> b(Shape{2, 2}, std::vector<double>{0.5, 0.5, 0.0, 1.0});
  Tensor<double> g(Shape{2, 2}, std::vector<double>{0.5, 0.5, 0.5, 0.5});
  std::vector<Var<double>> d{tape.constant(a), tape.constant(b)};
  const auto f = fuse<double>(d, tape.constant(g));
  const std::vector<data::ItemId> t{1, 1};
  const double expect = 0.5 * (-std::log(0.7 + kProbabilityFloor) - std::log(kProbabilityFloor));
  CHECK(moe_loss(f, t).value().item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::isfinite(moe_loss(f, t).value().item()));
}

TEST_CASE("isolated fusion trains only the gate") {
  Rng rng(5);
  auto gate = init_gate<double>(2, 3, 0, rng);
  auto z0 = random_param("z0", 3, 3, rng);
  auto z1 = random_param("z1", 3, 3, rng);
  auto l0 = random_param("l0", 3, 4, rng);
  auto l1 = random_param("l1", 3, 4, rng);
  const std::vector<data::ItemId> t{1, 4, 2};
  for (bool isolate : {true, false}) {
    for (auto* p : {&z0, &z1, &l0, &l1}) p->tensor.clear_grad();
    gate.weight.tensor.clear_grad();
    Tape<double> tape;
    std::vector<Var<double>> zs{tape.leaf(z0), tape.leaf(z1)};
    std::vector<Var<double>> ds{expert_distribution(tape.leaf(l0)),
                                expert_distribution(tape.leaf(l1))};
    const auto f = fuse<double>(ds, gate_forward<double>(tape, gate, zs), isolate);
    tape.backward(moe_loss(f, t));
    CHECK(gate.weight.tensor.has_grad());
    CHECK(l0.tensor.has_grad() == !isolate);
    CHECK_FALSE(z0.tensor.has_grad());
  }
}

TEST_CASE("gate parameter gradients match finite differences") {
  for (std::size_t hidden : {std::size_t{0}, std::size_t{5}}) {
    Rng rng(6 + hidden);
    auto gate = init_gate<double>(3, 4, hidden, rng);
    for (auto& v : gate.weight.tensor.values()) v = rng.uniform(-0.5, 0.5);
    std::vector<Tensor<double>> zs, ls;
    for (int e = 0; e < 3; ++e) {
      Tensor<double> z(Shape{6, 4}), l(Shape{6, 7});
      for (auto& v : z.values()) v = rng.normal();
      for (auto& v : l.values()) v = rng.normal();
      zs.push_back(z);
      ls.push_back(l);
    }
    const std::vector<data::ItemId> t{1, 2, 3, 7, 5, 6};
    auto loss = [&](bool backward) {
      Tape<double> tape;
      std::vector<Var<double>> zv, dv;
      for (int e = 0; e < 3; ++e) {
        zv.push_back(tape.constant(zs[e]));
        dv.push_back(expert_distribution(tape.constant(ls[e])));
      }
      const auto out = moe_loss(fuse<double>(dv, gate_forward<double>(tape, gate, zv)), t);
      if (backward) {
        gate.for_each([](Parameter<double>& p) { p.tensor.clear_grad(); });
        tape.backward(out);
      }
      return out.value().item();
    };
    loss(true);
    std::vector<Parameter<double>*> params;
    gate.for_each([&](Parameter<double>& p) { params.push_back(&p); });
    const auto r = fmoe::testing::check_gradients(params, [&] { return loss(false); });
    INFO("hidden " << hidden << " worst " << r.worst);
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("gate input width is checked") {
  Rng rng(7);
  auto gate = init_gate<double>(2, 4, 0, rng);
  Tape<double> tape;
  std::vector<Var<double>> zs{tape.constant(Tensor<double>(Shape{2, 4})),
                              tape.constant(Tensor<double>(Shape{2, 3}))};
  CHECK_THROWS(gate_forward<double>(tape, gate, zs));
  std::vector<Var<double>> one{tape.constant(Tensor<double>(Shape{2, 4}))};
  CHECK_THROWS(gate_forward<double>(tape, gate, one));
}
