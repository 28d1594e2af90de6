#include <cmath>
#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "palab/errors.hpp"
#include "palab/ops.hpp"

using namespace palab;
using palab::test::micro_config;
using palab::test::random_batch;
using palab::test::random_weights;

namespace {

TokenBatch fixed_batch() {
  Dataset d{{{kClsId, 3, 4, 5, 6, 7}, 0}, {{kClsId, 9, 9, 3}, 1}, {{kClsId, 15, 4, 3, 12, 8, 11, 10}, 1}};
  return make_batch(d);
}

// Zeroes every per-head weight of one block so its MHA reduces to the W^O bias.
void kill_block_heads(TransformerWeights& w, std::size_t layer) {
  auto& b = w.blocks[layer];
  for (Tensor* t : {&b.query.weight, &b.query.bias, &b.key.weight, &b.key.bias, &b.value.weight, &b.value.bias,
                    &b.output.weight}) {
    for (double& v : t->data()) v = 0.0;
  }
}

}  // namespace

TEST_CASE("config invariants") {
  CHECK_NOTHROW(ModelConfig::toy().validate());
  CHECK_NOTHROW(ModelConfig::reference().validate());
  ModelConfig bad;
  bad.hidden = 60;
  CHECK_THROWS_AS(bad.validate(), InputError);
  CHECK(model_config_from_json(to_json(ModelConfig::reference())) == ModelConfig::reference());
}

TEST_CASE("all-ones mask is bit-identical to no mask") {
  const auto w = init_weights(ModelConfig::toy(), 0);
  Rng rng(1);
  const auto batch = random_batch(w.config, 5, 9, rng);
  const auto mask = HeadMask::ones(w.config);
  CHECK(infer_logits(w, batch) == infer_logits(w, batch, &mask));
}

TEST_CASE("zero mask row equals a block whose heads are zeroed") {
  const auto w = random_weights(ModelConfig::toy(), 3);
  Rng rng(2);
  const auto batch = random_batch(w.config, 4, 7, rng);
  auto mask = HeadMask::ones(w.config);
  for (std::size_t h = 0; h < w.config.num_heads; ++h) mask.set(1, h, 0.0);
  auto dead = w;
  kill_block_heads(dead, 1);
  const auto a = infer_logits(w, batch, &mask);
  const auto b = infer_logits(dead, batch);
  CHECK(max_abs_diff(a.data(), b.data()) < 1e-10);
}

TEST_CASE("golden logits for the toy model") {
  const auto w = init_weights(ModelConfig::toy(), 0);
  const auto logits = infer_logits(w, fixed_batch());
  const std::string path = std::string(PALAB_GOLDEN_DIR) + "/toy_seed0_logits.json";
  if (std::getenv("PALAB_WRITE_GOLDEN") != nullptr) {
    std::ofstream(path) << nlohmann::json{{"shape", logits.shape()},
                                          {"values", std::vector<double>(logits.data().begin(), logits.data().end())}}
                               .dump(2)
                        << "\n";
  }
  std::ifstream in(path);
  REQUIRE(in.good());
  const auto j = nlohmann::json::parse(in);
  const Tensor golden(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
  CHECK(golden.shape() == logits.shape());
  CHECK(max_abs_diff(golden.data(), logits.data()) == 0.0);
}

TEST_CASE("attention head edge cases") {
  const auto w = random_weights(ModelConfig::toy(), 4);
  Rng rng(3);
  const auto batch = random_batch(w.config, 2, 6, rng, 3);
  const auto layout = make_layout(batch);
  const Tensor hidden = palab::test::random_tensor({batch.batch_size * batch.seq_len, w.config.hidden}, rng);
  auto head = [&](const HeadMask* m) {
    Graph g(Graph::Mode::kNoGrad);
    return g.to_tensor(attention_head(g, w, 2, 1, g.view(hidden), layout, m));
  };
  auto mask = HeadMask::ones(w.config);
  const auto full = head(&mask);
  CHECK(full == head(nullptr));
  mask.set(2, 1, 0.0);
  const auto zeroed = head(&mask);
  for (double v : zeroed.data()) CHECK(v == 0.0);
  mask.set(2, 1, 0.5);
  const auto half = head(&mask);
  for (std::size_t i = 0; i < full.size(); ++i) CHECK(half[i] == 0.5 * full[i]);

  Graph g(Graph::Mode::kNoGrad);
  CHECK_THROWS_AS(attention_head(g, w, 4, 0, g.view(hidden), layout), IndexError);
  CHECK_THROWS_AS(attention_head(g, w, 0, 4, g.view(hidden), layout), IndexError);
}

TEST_CASE("single-token attention returns the value row") {
  const auto w = random_weights(ModelConfig::toy(), 5);
  const auto batch = make_batch(Dataset{{{kClsId}, 0}});
  const auto layout = make_layout(batch);
  Rng rng(4);
  const Tensor hidden = palab::test::random_tensor({1, w.config.hidden}, rng);
  Graph g(Graph::Mode::kNoGrad);
  const auto out = g.to_tensor(attention_head(g, w, 0, 2, g.view(hidden), layout));
  Var v = ops::add_bias(g, ops::matmul(g, g.view(hidden), g.view(w.blocks[0].value.weight)),
                        g.view(w.blocks[0].value.bias));
  const auto vrow = g.to_tensor(ops::slice_cols(g, v, 32, 48));
  CHECK(max_abs_diff(out.data(), vrow.data()) < 1e-15);
}

TEST_CASE("mask output is linear in its own entry") {
  const auto w = random_weights(ModelConfig::toy(), 6);
  Rng rng(5);
  const auto batch = random_batch(w.config, 3, 5, rng, 2);
  const auto layout = make_layout(batch);
  const Tensor hidden = palab::test::random_tensor({batch.batch_size * batch.seq_len, w.config.hidden}, rng);
  auto mask = HeadMask::ones(w.config);
  Graph g(Graph::Mode::kNoGrad);
  const auto one = g.to_tensor(attention_head(g, w, 3, 3, g.view(hidden), layout, &mask));
  for (double xi : {0.0, 0.25, 0.9}) {
    mask.set(3, 3, xi);
    const auto out = g.to_tensor(attention_head(g, w, 3, 3, g.view(hidden), layout, &mask));
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == xi * one[i]);
  }
}

TEST_CASE("zero FFN weights leave LayerNorm of residual plus bias") {
  auto w = random_weights(micro_config(), 7);
  auto& b = w.blocks[0];
  for (double& v : b.ffn_up.weight.data()) v = 0.0;
  for (double& v : b.ffn_down.weight.data()) v = 0.0;
  Rng rng(6);
  const auto batch = random_batch(w.config, 2, 4, rng, 4);
  // Rebuild block 0 by hand up to the FFN norm and compare with the model's
  // hidden state through a one-block copy.
  auto one = w;
  one.blocks.resize(1);
  one.config.num_layers = 1;
  Graph g(Graph::Mode::kNoGrad);
  const std::vector<std::size_t> pos{0, 1, 2, 3, 0, 1, 2, 3};
  const std::vector<std::size_t> types(8, 0);
  Var x = ops::add(g, ops::embedding(g, g.view(w.token_embedding), batch.token_ids),
                   ops::embedding(g, g.view(w.position_embedding), pos));
  x = ops::add(g, x, ops::embedding(g, g.view(w.type_embedding), types));
  x = ops::layernorm(g, x, g.view(w.embedding_norm.gamma), g.view(w.embedding_norm.beta), 1e-12);
  const auto layout = make_layout(batch);
  std::vector<Var> heads;
  for (std::size_t h = 0; h < 2; ++h) heads.push_back(attention_head(g, w, 0, h, x, layout));
  Var attn = ops::add_bias(g, ops::matmul(g, ops::concat_cols(g, heads, 8), g.view(b.output.weight)),
                           g.view(b.output.bias));
  Var x1 = ops::layernorm(g, ops::add(g, x, attn), g.view(b.attention_norm.gamma), g.view(b.attention_norm.beta),
                          1e-12);
  Var expect = ops::layernorm(g, ops::add_bias(g, x1, g.view(b.ffn_down.bias)), g.view(b.ffn_norm.gamma),
                              g.view(b.ffn_norm.beta), 1e-12);
  const std::vector<std::size_t> first{0, 4};
  Var pooled = ops::tanh(g, ops::add_bias(g, ops::matmul(g, ops::select_rows(g, expect, first), g.view(w.pooler.weight)),
                                          g.view(w.pooler.bias)));
  const auto logits = g.to_tensor(
      ops::add_bias(g, ops::matmul(g, pooled, g.view(w.classifier.weight)), g.view(w.classifier.bias)));
  CHECK(max_abs_diff(logits.data(), infer_logits(one, batch).data()) < 1e-12);
}

TEST_CASE("forward rejects bad inputs") {
  const auto w = init_weights(ModelConfig::toy(), 0);
  auto batch = fixed_batch();
  batch.token_ids[1] = 99;
  CHECK_THROWS_AS(infer_logits(w, batch), InputError);
  Dataset longseq{{std::vector<std::size_t>(40, kClsId), 0}};
  CHECK_THROWS_AS(infer_logits(w, make_batch(longseq)), InputError);
  HeadMask wrong{Tensor::filled({3, 4}, 1.0)};
  CHECK_THROWS_AS(infer_logits(w, fixed_batch(), &wrong), InputError);
}

TEST_CASE("end-to-end gradients match central differences for every scalar") {
  auto w = random_weights(micro_config(), 8);
  Rng rng(7);
  const auto batch = random_batch(w.config, 3, 5, rng, 2);
  std::vector<Tensor*> params;
  for_each_parameter(w, [&](const std::string&, ParamRole, Tensor& t) { params.push_back(&t); });
  auto loss = [&](Graph& g) { return ops::cross_entropy(g, forward(g, w, batch), batch.labels); };
  // Embedding rows never looked up have zero gradient on both sides.
  CHECK(palab::test::gradient_check(loss, params, 1e-5, 1e-7) < 1e-4);
}

TEST_CASE("toy-config gradients on a strided subset of scalars") {
  auto w = random_weights(ModelConfig::toy(), 9);
  Rng rng(8);
  const auto batch = random_batch(w.config, 2, 6, rng, 3);
  std::vector<Tensor*> params;
  for_each_parameter(w, [&](const std::string&, ParamRole, Tensor& t) { params.push_back(&t); });
  auto loss = [&](Graph& g) { return ops::cross_entropy(g, forward(g, w, batch), batch.labels); };
  // Roundoff in the 64-wide loss swamps gradients below ~1e-5.
  CHECK(palab::test::gradient_check(loss, params, 1e-4, 1e-5, 97) < 1e-4);
}

TEST_CASE("identical seeds give identical weights, logits and gradients") {
  auto a = init_weights(ModelConfig::toy(), 11);
  auto b = init_weights(ModelConfig::toy(), 11);
  CHECK(weights_digest(a) == weights_digest(b));
  CHECK(weights_digest(a) != weights_digest(init_weights(ModelConfig::toy(), 12)));
  Rng r1(9), r2(9);
  const auto b1 = random_batch(a.config, 4, 6, r1);
  const auto b2 = random_batch(b.config, 4, 6, r2);
  for (auto* w : {&a, &b}) {
    for_each_parameter(*w, [](const std::string&, ParamRole, Tensor& t) { t.set_requires_grad(true); });
  }
  Graph ga, gb;
  ga.backward(ops::cross_entropy(ga, forward(ga, a, b1), b1.labels));
  gb.backward(ops::cross_entropy(gb, forward(gb, b, b2), b2.labels));
  bool same = true;
  for (std::size_t l = 0; l < a.blocks.size(); ++l) {
    const auto ga1 = a.blocks[l].query.weight.grad();
    const auto gb1 = b.blocks[l].query.weight.grad();
    same = same && std::equal(ga1.begin(), ga1.end(), gb1.begin());
  }
  CHECK(same);
}
