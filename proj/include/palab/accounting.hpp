#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "palab/lora.hpp"
#include "palab/model.hpp"
#include "palab/pruning.hpp"

namespace palab {

// Published figures for bert-base, shown next to computed values.
inline constexpr double kPublishedFullParams = 109.48e6;
inline constexpr double kPublishedLoraParams = 109.7e6;
inline constexpr double kPublishedPrunedParams = 101.29e6;
inline constexpr double kPublishedLoraTrainable = 259.6e3;
inline constexpr double kPublishedPruneLoraTrainable = 308.7e3;
inline constexpr double kPublishedFullMemoryMB = 418.7;
inline constexpr double kPublishedLoraMemoryMB = 419.6;
inline constexpr double kPublishedPruneLoraMemoryMB = 392.4;

// Parameters removed with one head: Q/K/V column slices with their biases
// and the W^O row slice.
std::size_t params_per_head(const ModelConfig& config);

/// Forward FLOPs of `batch` unpadded sequences. One multiply-accumulate
/// counts 2; additions, bias adds, scaling and relu 1 per element; softmax
/// 5, LayerNorm 8 and tanh 1 per element; lookups and copies 0.
struct FlopsReport {
  std::size_t seq_len = 0;
  std::size_t batch = 1;
  std::uint64_t embedding = 0;
  std::uint64_t mha_matmul = 0;  // Q/K/V/O projections, QKᵀ, PV
  std::uint64_t mha_other = 0;   // biases, score scaling, key bias, softmax
  std::uint64_t ffn_matmul = 0;
  std::uint64_t ffn_other = 0;
  std::uint64_t layernorm = 0;
  std::uint64_t residual = 0;
  std::uint64_t pooler = 0;
  std::uint64_t classifier = 0;
  std::uint64_t adapters = 0;

  std::uint64_t total() const;
  double per_token() const;
};

struct BlockCount {
  std::size_t kept_heads = 0;
  std::size_t attention = 0;
  std::size_t ffn = 0;
  std::size_t layernorm = 0;
  std::size_t adapter_rank = 0;
  std::size_t adapters = 0;

  std::size_t total() const { return attention + ffn + layernorm + adapters; }
};

struct ParamReport {
  std::string regime;  // full_finetune, pruned, lora or prune_lora
  std::size_t embeddings = 0;
  std::size_t embedding_norm = 0;
  std::vector<BlockCount> blocks;
  std::size_t pooler = 0;
  std::size_t classifier = 0;
  std::size_t pruned_heads = 0;
  std::size_t head_params = 0;  // per pruned head

  std::size_t base_params = 0;  // everything except adapters
  std::size_t adapter_params = 0;
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  double trainable_fraction = 0.0;
  std::size_t weight_bytes_f64 = 0;
  std::size_t weight_bytes_f32 = 0;
  FlopsReport flops;
};

/// Closed-form counts. Without a rank plan every weight is trainable; with
/// one, LayerNorms, adapters and the classifier are. Adapter shapes follow
/// the pruned widths when a plan is given.
ParamReport count_params(const ModelConfig& config, const PrunePlan* plan = nullptr,
                         const RankPlan* rank_plan = nullptr, std::size_t seq_len = 128);

// Same accounting for a materialized model and optional adapters.
ParamReport count_params(const TransformerWeights& w, const LoraAdapters* adapters = nullptr,
                         std::size_t seq_len = 128);

FlopsReport estimate_flops(const ModelConfig& config, const PrunePlan* plan, std::size_t seq_len,
                           const RankPlan* rank_plan = nullptr, std::size_t batch = 1);

/// Plan for counting without an importance map: pruned heads are spread as
/// evenly as possible over blocks, taking the highest head indices of the
/// last blocks first.
PrunePlan spread_plan(const ModelConfig& config, std::size_t keep_count);

double mebibytes(std::size_t bytes);

nlohmann::json to_json(const ParamReport& report);
nlohmann::json to_json(const FlopsReport& flops);

// Aligned table with one row per report.
std::string format_report_table(const std::vector<ParamReport>& reports);

}  // namespace palab

namespace palab {

// Published bert-base figures, then computed counts next to them with the
// difference for each regime present. Meaningful for the reference geometry.
std::string published_comparison(const std::vector<ParamReport>& reports);

}  // namespace palab
