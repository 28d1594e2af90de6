#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "json.hpp"
#include "palab/graph.hpp"
#include "palab/model.hpp"
#include "palab/tensor.hpp"

namespace palab {

enum class LoraTarget : std::size_t { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };

inline constexpr std::array<LoraTarget, 4> kLoraTargets = {
    LoraTarget::kQuery, LoraTarget::kKey, LoraTarget::kValue, LoraTarget::kOutput};

const char* target_name(LoraTarget target);

/// Per-block adapter ranks. The n_high blocks of largest importance get
/// rank_high, the others rank_low.
struct RankPlan {
  std::vector<std::size_t> block_rank;
  std::size_t n_high = 0;
  std::size_t rank_high = 0;
  std::size_t rank_low = 0;
  std::vector<double> block_importance;

  friend bool operator==(const RankPlan&, const RankPlan&) = default;
};

// Ties in importance go to the lower block index.
RankPlan make_rank_plan(std::span<const double> block_importance, std::size_t n_high,
                        std::size_t rank_high, std::size_t rank_low);
RankPlan uniform_rank_plan(std::size_t num_layers, std::size_t rank);

nlohmann::json to_json(const RankPlan& plan);
RankPlan rank_plan_from_json(const nlohmann::json& j);

// a: [in, r] reduces, b: [r, out] expands; the delta applied to x is (x a) b.
struct LoraPair {
  Tensor a;
  Tensor b;
};

struct BlockAdapters {
  std::size_t rank = 0;
  std::array<LoraPair, 4> pairs;

  LoraPair& operator[](LoraTarget t) { return pairs[static_cast<std::size_t>(t)]; }
  const LoraPair& operator[](LoraTarget t) const { return pairs[static_cast<std::size_t>(t)]; }
};

inline constexpr double kLoraInitStd = 0.02;

struct LoraAdapters {
  RankPlan plan;
  double scaling = 1.0;
  std::uint64_t seed = 0;
  std::vector<BlockAdapters> blocks;
};

// (in, out) of the weight matrix a target adapts, following pruned shapes.
std::pair<std::size_t, std::size_t> target_dims(const EncoderBlock& block, LoraTarget target,
                                                const ModelConfig& config);

// A ~ Normal(0, 0.02^2) from a seeded stream, B = 0.
LoraAdapters init_adapters(const TransformerWeights& w, const RankPlan& plan, std::uint64_t seed,
                           double scaling = 1.0);

// Throws ShapeError unless every pair matches the weights it attaches to.
void validate_attachment(const TransformerWeights& w, const LoraAdapters& adapters);

template <class Adapters, class Fn>
  requires std::same_as<std::remove_const_t<Adapters>, LoraAdapters>
void for_each_adapter_parameter(Adapters& adapters, Fn&& fn) {
  for (std::size_t l = 0; l < adapters.blocks.size(); ++l) {
    for (LoraTarget t : kLoraTargets) {
      auto& pair = adapters.blocks[l][t];
      const std::string p = "blocks." + std::to_string(l) + ".lora." + target_name(t) + ".";
      fn(p + "a", pair.a);
      fn(p + "b", pair.b);
    }
  }
}

std::size_t adapter_parameter_count(const LoraAdapters& adapters);

// x W + scaling * ((x A) B)
Var adapter_forward(Graph& g, Var x, Var w, Var a, Var b, double scaling);

// W + scaling * (A B); `w` is left untouched.
Tensor merge(const Tensor& w, const LoraPair& pair, double scaling);

// Folds every adapter into its base matrix and bumps merge_count.
TransformerWeights merge_adapters(const TransformerWeights& w, const LoraAdapters& adapters);

}  // namespace palab
