#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "palab/errors.hpp"
#include "palab/ops.hpp"

using namespace palab;
using palab::test::gradient_check;
using palab::test::random_tensor;

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({1}, {NAN}), InputError);
  CHECK_THROWS_AS(Tensor({1}, {INFINITY}), InputError);
  Tensor empty({3, 0}, {});
  CHECK(empty.size() == 0);
}

TEST_CASE("matmul values and shape errors") {
  Graph g;
  Var a = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var b = g.constant(Tensor({2, 2}, {5, 6, 7, 8}));
  auto c = g.to_tensor(ops::matmul(g, a, b));
  CHECK(c == Tensor({2, 2}, {5, 6, 7, 8}));
  auto d = g.to_tensor(ops::matmul(g, g.constant(Tensor({1, 2}, {1, 2})), g.constant(Tensor({2, 1}, {3, 4}))));
  CHECK(d[0] == 11);
  try {
    ops::matmul(g, a, g.constant(Tensor({3, 1}, {1, 2, 3})));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 2]") != std::string::npos);
    CHECK(msg.find("[3, 1]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient against central differences") {
  Rng rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor w = random_tensor({3, 2}, rng);
  auto loss = [&](Graph& g) {
    return ops::sum(g, ops::mul(g, ops::matmul(g, g.bind(a), g.bind(b)), g.view(w)));
  };
  CHECK(gradient_check(loss, {&a, &b}) < 1e-6);
}

TEST_CASE("softmax values, stability and gradient") {
  Graph g;
  auto s = g.to_tensor(ops::softmax_lastdim(g, g.constant(Tensor({1, 3}, {0, 0, 0}))));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto big = g.to_tensor(ops::softmax_lastdim(g, g.constant(Tensor({1, 2}, {1000, 0}))));
  CHECK(big[0] == 1.0);
  CHECK(big[1] == 0.0);

  Rng rng(2);
  Tensor x = random_tensor({2, 5}, rng);
  Tensor w = random_tensor({2, 5}, rng);
  auto loss = [&](Graph& g2) { return ops::sum(g2, ops::mul(g2, ops::softmax_lastdim(g2, g2.bind(x)), g2.view(w))); };
  CHECK(gradient_check(loss, {&x}) < 1e-6);
}

TEST_CASE("layernorm values and gradients") {
  Graph g;
  Var one = g.constant(Tensor::filled({2}, 1.0));
  Var zero = g.constant(Tensor::zeros({2}));
  auto flat = g.to_tensor(ops::layernorm(g, g.constant(Tensor({1, 2}, {4, 4})), one, zero, 1e-12));
  CHECK(flat[0] == 0.0);
  CHECK(flat[1] == 0.0);
  auto std2 = g.to_tensor(ops::layernorm(g, g.constant(Tensor({1, 2}, {1, 3})), one, zero, 1e-12));
  CHECK(std2[0] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(std2[1] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK_THROWS_AS(ops::layernorm(g, g.constant(Tensor({1, 3}, {1, 2, 3})), one, zero, 1e-12), ShapeError);

  Rng rng(3);
  Tensor x = random_tensor({2, 4}, rng);
  Tensor gamma = random_tensor({4}, rng);
  Tensor beta = random_tensor({4}, rng);
  Tensor w = random_tensor({2, 4}, rng);
  auto loss = [&](Graph& g2) {
    return ops::sum(g2, ops::mul(g2, ops::layernorm(g2, g2.bind(x), g2.bind(gamma), g2.bind(beta), 1e-5), g2.view(w)));
  };
  CHECK(gradient_check(loss, {&x, &gamma, &beta}) < 1e-5);
}

TEST_CASE("cross entropy values, errors and gradient") {
  Graph g;
  const std::vector<std::size_t> zero{0};
  CHECK(g.value(ops::cross_entropy(g, g.constant(Tensor({1, 2}, {0, 0})), zero))[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const double tiny = g.value(ops::cross_entropy(g, g.constant(Tensor({1, 2}, {100, 0})), zero))[0];
  CHECK(tiny >= 0.0);
  CHECK(tiny < 1e-40);
  const std::vector<std::size_t> bad{2};
  CHECK_THROWS_AS(ops::cross_entropy(g, g.constant(Tensor({1, 2}, {0, 0})), bad), IndexError);

  Rng rng(4);
  Tensor logits = random_tensor({4, 3}, rng, -3, 3);
  const std::vector<std::size_t> labels{0, 2, 1, 2};
  double direct = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double lse = 0.0;
    for (std::size_t c = 0; c < 3; ++c) lse += std::exp(logits.at(r, c));
    direct += std::log(lse) - logits.at(r, labels[r]);
  }
  Graph g2;
  CHECK(std::abs(g2.value(ops::cross_entropy(g2, g2.view(logits), labels))[0] - direct / 4) < 1e-10);
  auto loss = [&](Graph& g3) { return ops::cross_entropy(g3, g3.bind(logits), labels); };
  CHECK(gradient_check(loss, {&logits}) < 1e-6);
}

TEST_CASE("backward on simple losses") {
  Tensor w({2, 2}, {1, -2, 3, 0.5});
  w.set_requires_grad(true);
  {
    Graph g;
    g.backward(ops::sum(g, g.bind(w)));
  }
  for (double v : w.grad()) CHECK(v == 1.0);
  w.zero_grad();
  {
    Graph g;
    Var x = g.bind(w);
    g.backward(ops::scale(g, ops::sum(g, ops::mul(g, x, x)), 0.5));
  }
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.grad()[i] == w[i]);
  {
    Graph g;
    Var x = g.bind(w);
    g.backward(ops::scale(g, ops::sum(g, ops::mul(g, x, x)), 0.5));
  }
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.grad()[i] == 2 * w[i]);

  Graph g;
  CHECK_THROWS_AS(g.backward(g.bind(w)), ContractError);
  Graph ng(Graph::Mode::kNoGrad);
  CHECK_THROWS_AS(ng.backward(ops::sum(ng, ng.bind(w))), ContractError);
}

TEST_CASE("remaining ops against central differences") {
  Rng rng(5);
  Tensor a = random_tensor({6, 3}, rng);
  Tensor b = random_tensor({6, 3}, rng);
  Tensor bias = random_tensor({3}, rng);
  Tensor s = random_tensor({2, 2}, rng);
  Tensor table = random_tensor({5, 3}, rng);
  Tensor w = random_tensor({2, 4}, rng);
  const std::vector<std::size_t> ids{4, 0, 4, 2, 1, 3};
  const std::vector<std::size_t> rows{5, 0};
  auto loss = [&](Graph& g) {
    Var x = ops::add(g, g.bind(a), ops::embedding(g, g.bind(table), ids));
    x = ops::tanh(g, ops::add_bias(g, x, g.bind(bias)));
    Var y = ops::relu(g, ops::scale_by_entry(g, g.bind(b), g.bind(s), 3));
    Var att = ops::batched_matmul(g, ops::softmax_lastdim(g, ops::batched_matmul_bt(g, x, y, 2)), y, 2);
    Var parts[] = {ops::slice_cols(g, att, 1, 3), ops::slice_cols(g, x, 0, 2)};
    Var cat = ops::concat_cols(g, parts, 6);
    return ops::sum(g, ops::mul(g, ops::select_rows(g, cat, rows), g.view(w)));
  };
  CHECK(gradient_check(loss, {&a, &b, &bias, &s, &table}) < 1e-6);
}

TEST_CASE("no-grad mode gives the recorded values") {
  Rng rng(6);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 4}, rng);
  a.set_requires_grad(true);
  auto run = [&](Graph& g) { return g.to_tensor(ops::softmax_lastdim(g, ops::matmul(g, g.bind(a), g.bind(b)))); };
  Graph rec;
  Graph ng(Graph::Mode::kNoGrad);
  CHECK(run(rec) == run(ng));
}
