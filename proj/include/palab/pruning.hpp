#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "json.hpp"
#include "palab/importance.hpp"
#include "palab/model.hpp"

namespace palab {

/// Heads to keep, [layers x heads] in original head indices.
struct PrunePlan {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<std::uint8_t> keep;
  std::size_t keep_count = 0;
  std::uint64_t source_map_digest = 0;

  bool kept(std::size_t layer, std::size_t head) const { return keep[layer * heads + head] != 0; }
  std::size_t kept_in_block(std::size_t layer) const;
  std::size_t pruned_count() const { return layers * heads - keep_count; }
  // Original indices of kept heads in a block, ascending.
  std::vector<std::size_t> kept_heads(std::size_t layer) const;

  friend bool operator==(const PrunePlan&, const PrunePlan&) = default;
};

// Keeps the keep_count heads of largest final importance. Equal scores go
// to the lower layer, then the lower head index.
PrunePlan select_heads(const ImportanceMap& map, std::size_t keep_count);

// A plan from an explicit keep grid (tests, hand-made plans).
PrunePlan plan_from_keep(std::size_t layers, std::size_t heads, std::vector<std::uint8_t> keep,
                         std::uint64_t source_map_digest = 0);

// Plan describing the heads a (possibly pruned) model still has.
PrunePlan plan_of(const TransformerWeights& w);

/// Zeroes the Q/K/V column slices (weights and biases) and W^O row slices
/// of every pruned head and returns a mask with those heads set to 0.
/// Shapes are unchanged.
std::pair<TransformerWeights, HeadMask> apply_mask_prune(const TransformerWeights& w,
                                                         const PrunePlan& plan);

/// Physically removes pruned heads. Kept slices stay in original head
/// order; the W^O bias is kept whole. Heads already absent from `w` must
/// not be kept by the plan.
TransformerWeights apply_slice_prune(const TransformerWeights& w, const PrunePlan& plan);

nlohmann::json to_json(const PrunePlan& plan);
PrunePlan prune_plan_from_json(const nlohmann::json& j);

}  // namespace palab
