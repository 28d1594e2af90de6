#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "palab/accounting.hpp"
#include "palab/errors.hpp"
#include "palab/pruning.hpp"

using namespace palab;

namespace {

// Every row the same length, so no padding enters the op counts.
TokenBatch full_batch(const ModelConfig& c, std::size_t batch, std::size_t seq_len, Rng& rng) {
  return palab::test::random_batch(c, batch, seq_len, rng, seq_len);
}

std::uint64_t counted_flops(const TransformerWeights& w, const TokenBatch& batch, const LoraAdapters* a = nullptr) {
  Graph g(Graph::Mode::kNoGrad);
  forward(g, w, batch, nullptr, a);
  return g.flops();
}

}  // namespace

TEST_CASE("reference parameter counts") {
  const auto c = ModelConfig::reference();
  const auto full = count_params(c);
  CHECK(full.total_params == 109482240);
  CHECK(full.trainable_params == full.total_params);
  CHECK(params_per_head(c) == 196800);
  const auto plan = spread_plan(c, 100);
  CHECK(plan.keep_count == 100);
  const auto pruned = count_params(c, &plan);
  CHECK(pruned.total_params == 100823040);
  CHECK(pruned.pruned_heads == 44);
  CHECK(full.total_params - pruned.total_params == 44 * 196800);
  CHECK(full.weight_bytes_f32 == 4 * 109482240ull);
  CHECK(std::abs(mebibytes(full.weight_bytes_f32) - 417.64) < 0.01);
}

TEST_CASE("parameter count matches materialized weights") {
  const auto w = init_weights(ModelConfig::toy(), 0);
  CHECK(count_params(w).total_params == parameter_count(w));
  std::vector<std::uint8_t> keep(16, 1);
  keep[0] = keep[5] = keep[6] = 0;
  const auto pruned = apply_slice_prune(w, plan_from_keep(4, 4, keep));
  const auto a = init_adapters(pruned, make_rank_plan(std::vector<double>{1, 0, 0, 1}, 2, 8, 4), 1);
  const auto r = count_params(pruned, &a);
  CHECK(r.regime == "prune_lora");
  CHECK(r.base_params == parameter_count(pruned));
  CHECK(r.adapter_params == adapter_parameter_count(a));
  CHECK(r.total_params == r.base_params + r.adapter_params);
  std::size_t layernorm = 2 * 64 + 4 * 4 * 64;
  CHECK(r.trainable_params == layernorm + r.adapter_params + 64 * 2 + 2);
  CHECK(r.trainable_fraction == doctest::Approx(static_cast<double>(r.trainable_params) / r.total_params));
}

TEST_CASE("spread plan removes high heads of late blocks first") {
  const auto c = ModelConfig::toy();
  const auto p = spread_plan(c, 10);
  CHECK(p.kept_in_block(3) == 2);
  CHECK(p.kept_in_block(2) == 2);
  CHECK(p.kept_in_block(1) == 3);
  CHECK(p.kept_in_block(0) == 3);
  CHECK_FALSE(p.kept(3, 3));
  CHECK_FALSE(p.kept(0, 3));
  CHECK(p.kept(0, 2));
  CHECK(spread_plan(c, 0).keep_count == 0);
  CHECK_THROWS_AS(spread_plan(c, 17), ContractError);
}

TEST_CASE("FLOP estimate equals the instrumented forward") {
  Rng rng(1);
  const auto w = init_weights(ModelConfig::toy(), 2);
  for (std::size_t s : {1, 5, 9}) {
    const auto batch = full_batch(w.config, 3, s, rng);
    CHECK(counted_flops(w, batch) == estimate_flops(w.config, nullptr, s, nullptr, 3).total());
  }
  std::vector<std::uint8_t> keep(16, 1);
  std::fill_n(keep.begin() + 4, 4, std::uint8_t{0});
  keep[9] = keep[15] = 0;
  const auto plan = plan_from_keep(4, 4, keep);
  const auto pruned = apply_slice_prune(w, plan);
  const auto rp = make_rank_plan(std::vector<double>{0.1, 0.7, 0.3, 0.9}, 2, 8, 4);
  const auto a = init_adapters(pruned, rp, 3);
  const auto batch = full_batch(w.config, 2, 7, rng);
  CHECK(counted_flops(pruned, batch) == estimate_flops(w.config, &plan, 7, nullptr, 2).total());
  CHECK(counted_flops(pruned, batch, &a) == estimate_flops(w.config, &plan, 7, &rp, 2).total());
}

TEST_CASE("FLOPs shrink with pruning and per-token scales") {
  const auto c = ModelConfig::reference();
  const auto full = estimate_flops(c, nullptr, 128);
  const auto plan = spread_plan(c, 100);
  const auto pruned = estimate_flops(c, &plan, 128);
  CHECK(pruned.total() < full.total());
  CHECK(pruned.ffn_matmul == full.ffn_matmul);
  CHECK(full.per_token() == doctest::Approx(static_cast<double>(full.total()) / 128));
  const auto twice = estimate_flops(c, nullptr, 128, nullptr, 2);
  CHECK(twice.total() == 2 * full.total());
  CHECK_THROWS_AS(estimate_flops(c, nullptr, 0), ContractError);
}

TEST_CASE("report table and comparison mention every regime") {
  const auto c = ModelConfig::reference();
  const auto plan = spread_plan(c, 100);
  const std::vector<double> flat(12, 0.0);
  const auto rp = make_rank_plan(flat, 4, 8, 4);
  const std::vector<ParamReport> reports{count_params(c), count_params(c, &plan), count_params(c, nullptr, &rp),
                                         count_params(c, &plan, &rp)};
  const auto table = format_report_table(reports);
  for (const char* name : {"full_finetune", "pruned", "lora", "prune_lora"}) {
    CHECK(table.find(name) != std::string::npos);
  }
  const auto cmp = published_comparison(reports);
  CHECK(cmp.find("101.29") != std::string::npos);
  CHECK(cmp.find("published") != std::string::npos);
  const auto j = to_json(reports[3]);
  CHECK(j.at("total_params") == reports[3].total_params);
  CHECK(mebibytes(1 << 20) == 1.0);
}

TEST_CASE("reference breakdown") {
  const auto r = count_params(ModelConfig::reference());
  CHECK(r.embeddings + r.embedding_norm == 23837184);
  CHECK(r.blocks.size() == 12);
  for (const auto& b : r.blocks) CHECK(b.attention + b.ffn + b.layernorm == 7087872);
  CHECK(r.pooler == 590592);
  std::size_t sum = r.embeddings + r.embedding_norm + r.pooler + r.classifier;
  for (const auto& b : r.blocks) sum += b.attention + b.ffn + b.layernorm + b.adapters;
  CHECK(sum == r.total_params);
}

TEST_CASE("FLOPs under head pruning") {
  const auto c = ModelConfig::toy();
  const auto full = estimate_flops(c, nullptr, 9);
  std::vector<std::uint8_t> half(16, 0);
  for (std::size_t l = 0; l < 4; ++l) half[l * 4] = half[l * 4 + 1] = 1;
  const auto hp = plan_from_keep(4, 4, half);
  CHECK(2 * estimate_flops(c, &hp, 9).mha_matmul == full.mha_matmul);
  const auto none = plan_from_keep(4, 4, std::vector<std::uint8_t>(16, 0));
  const auto empty = estimate_flops(c, &none, 9);
  CHECK(empty.mha_matmul == 0);
  // Only the W^O bias remains of each attention sublayer.
  CHECK(empty.mha_other == 4 * 9 * 64);
  CHECK(empty.ffn_matmul == full.ffn_matmul);
  CHECK(empty.ffn_other == full.ffn_other);
}

TEST_CASE("rank-one adapters give the minimal adapter count") {
  const auto w = init_weights(ModelConfig::toy(), 0);
  const auto a = init_adapters(w, uniform_rank_plan(4, 1), 0);
  std::size_t walk = 0;
  for (const auto& b : a.blocks) {
    for (LoraTarget t : kLoraTargets) {
      const auto [in, out] = target_dims(w.blocks[0], t, w.config);
      walk += in + out;
      CHECK(b[t].a.size() + b[t].b.size() == in + out);
    }
  }
  CHECK(adapter_parameter_count(a) == walk);
  CHECK(count_params(w, &a).adapter_params == walk);
}
