#include "palab/lora.hpp"

#include <algorithm>
#include <numeric>

#include "palab/errors.hpp"
#include "palab/kernels.hpp"
#include "palab/ops.hpp"
#include "palab/rng.hpp"

namespace palab {

const char* target_name(LoraTarget target) {
  switch (target) {
    case LoraTarget::kQuery: return "query";
    case LoraTarget::kKey: return "key";
    case LoraTarget::kValue: return "value";
    case LoraTarget::kOutput: return "output";
  }
  return "unknown";
}

RankPlan make_rank_plan(std::span<const double> block_importance, std::size_t n_high,
                        std::size_t rank_high, std::size_t rank_low) {
  const std::size_t layers = block_importance.size();
  if (n_high > layers) {
    throw ContractError("rank plan: n_high " + std::to_string(n_high) + " exceeds " +
                        std::to_string(layers) + " blocks");
  }
  if (rank_low < 1 || rank_high < rank_low) {
    throw ContractError("rank plan: need rank_high >= rank_low >= 1");
  }
  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return block_importance[a] > block_importance[b];
  });
  RankPlan plan;
  plan.block_rank.assign(layers, rank_low);
  for (std::size_t i = 0; i < n_high; ++i) plan.block_rank[order[i]] = rank_high;
  plan.n_high = n_high;
  plan.rank_high = rank_high;
  plan.rank_low = rank_low;
  plan.block_importance.assign(block_importance.begin(), block_importance.end());
  return plan;
}

RankPlan uniform_rank_plan(std::size_t num_layers, std::size_t rank) {
  std::vector<double> flat(num_layers, 0.0);
  return make_rank_plan(flat, 0, rank, rank);
}

nlohmann::json to_json(const RankPlan& plan) {
  return nlohmann::json{{"block_rank", plan.block_rank},
                        {"n_high", plan.n_high},
                        {"rank_high", plan.rank_high},
                        {"rank_low", plan.rank_low},
                        {"block_importance", plan.block_importance}};
}

RankPlan rank_plan_from_json(const nlohmann::json& j) {
  RankPlan plan;
  try {
    j.at("block_rank").get_to(plan.block_rank);
    j.at("n_high").get_to(plan.n_high);
    j.at("rank_high").get_to(plan.rank_high);
    j.at("rank_low").get_to(plan.rank_low);
    j.at("block_importance").get_to(plan.block_importance);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("rank plan: ") + e.what());
  }
  if (plan.block_rank.size() != plan.block_importance.size()) {
    throw FormatError("rank plan: block_rank and block_importance lengths differ");
  }
  return plan;
}

std::pair<std::size_t, std::size_t> target_dims(const EncoderBlock& block, LoraTarget target,
                                                const ModelConfig& config) {
  const std::size_t width = block.heads.size() * config.head_dim;
  if (target == LoraTarget::kOutput) return {width, config.hidden};
  return {config.hidden, width};
}

LoraAdapters init_adapters(const TransformerWeights& w, const RankPlan& plan, std::uint64_t seed,
                           double scaling) {
  if (plan.block_rank.size() != w.blocks.size()) {
    throw ShapeError("rank plan covers " + std::to_string(plan.block_rank.size()) +
                     " blocks, model has " + std::to_string(w.blocks.size()));
  }
  Rng rng(derive_seed(seed, 2));
  LoraAdapters adapters;
  adapters.plan = plan;
  adapters.scaling = scaling;
  adapters.seed = seed;
  adapters.blocks.resize(w.blocks.size());
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const std::size_t r = plan.block_rank[l];
    if (r < 1) throw ContractError("rank plan: block ranks must be positive");
    adapters.blocks[l].rank = r;
    for (LoraTarget t : kLoraTargets) {
      const auto [in, out] = target_dims(w.blocks[l], t, w.config);
      std::vector<double> a(in * r);
      for (double& v : a) v = rng.normal(0.0, kLoraInitStd);
      adapters.blocks[l][t] = LoraPair{Tensor({in, r}, std::move(a)), Tensor::zeros({r, out})};
    }
  }
  return adapters;
}

void validate_attachment(const TransformerWeights& w, const LoraAdapters& adapters) {
  if (adapters.blocks.size() != w.blocks.size()) {
    throw ShapeError("adapters cover " + std::to_string(adapters.blocks.size()) +
                     " blocks, model has " + std::to_string(w.blocks.size()));
  }
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& ba = adapters.blocks[l];
    for (LoraTarget t : kLoraTargets) {
      const auto [in, out] = target_dims(w.blocks[l], t, w.config);
      const LoraPair& p = ba[t];
      if (p.a.shape() != Shape{in, ba.rank} || p.b.shape() != Shape{ba.rank, out}) {
        throw ShapeError("adapter blocks." + std::to_string(l) + "." + target_name(t) + ": A " +
                         shape_string(p.a.shape()) + ", B " + shape_string(p.b.shape()) +
                         " do not fit a " + std::to_string(in) + "x" + std::to_string(out) +
                         " weight at rank " + std::to_string(ba.rank));
      }
    }
  }
}

std::size_t adapter_parameter_count(const LoraAdapters& adapters) {
  std::size_t n = 0;
  for_each_adapter_parameter(adapters, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

Var adapter_forward(Graph& g, Var x, Var w, Var a, Var b, double scaling) {
  Var base = ops::matmul(g, x, w);
  Var delta = ops::matmul(g, ops::matmul(g, x, a), b);
  if (scaling != 1.0) delta = ops::scale(g, delta, scaling);
  return ops::add(g, base, delta);
}

Tensor merge(const Tensor& w, const LoraPair& pair, double scaling) {
  if (w.rank() != 2 || pair.a.rank() != 2 || pair.b.rank() != 2 || pair.a.dim(0) != w.dim(0) ||
      pair.b.dim(1) != w.dim(1) || pair.a.dim(1) != pair.b.dim(0)) {
    throw ShapeError("merge: A " + shape_string(pair.a.shape()) + " and B " +
                     shape_string(pair.b.shape()) + " do not compose to " + shape_string(w.shape()));
  }
  const std::size_t in = w.dim(0);
  const std::size_t out = w.dim(1);
  const std::size_t r = pair.a.dim(1);
  const auto& k = kernels::active();
  std::vector<double> delta(in * out);
  k.gemm(in, out, r, pair.a.data().data(), pair.b.data().data(), delta.data(), false);
  std::vector<double> merged(w.data().begin(), w.data().end());
  k.axpy(merged.size(), scaling, delta.data(), merged.data());
  return Tensor(w.shape(), std::move(merged));
}

TransformerWeights merge_adapters(const TransformerWeights& w, const LoraAdapters& adapters) {
  validate_attachment(w, adapters);
  TransformerWeights out = w;
  for (std::size_t l = 0; l < out.blocks.size(); ++l) {
    auto& b = out.blocks[l];
    const auto& ba = adapters.blocks[l];
    b.query.weight = merge(b.query.weight, ba[LoraTarget::kQuery], adapters.scaling);
    b.key.weight = merge(b.key.weight, ba[LoraTarget::kKey], adapters.scaling);
    b.value.weight = merge(b.value.weight, ba[LoraTarget::kValue], adapters.scaling);
    b.output.weight = merge(b.output.weight, ba[LoraTarget::kOutput], adapters.scaling);
  }
  out.merge_count += 1;
  return out;
}

}  // namespace palab
