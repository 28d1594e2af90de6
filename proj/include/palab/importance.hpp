#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "palab/data.hpp"
#include "palab/model.hpp"
#include "palab/tensor.hpp"

namespace palab {

inline constexpr double kDefaultImportanceEpsilon = 1e-12;
inline constexpr std::size_t kDefaultImportanceSample = 512;

/// Task-oriented head saliency, all matrices [num_layers, num_heads].
struct ImportanceMap {
  Tensor raw;            // accumulated |dL/dxi| divided by token_count
  Tensor l2_normalized;  // raw / (||raw||_2 + epsilon), norm over every head
  Tensor final;          // global min-max of l2_normalized
  std::size_t token_count = 0;
  std::size_t sample_size = 0;
  double epsilon = kDefaultImportanceEpsilon;

  std::size_t layers() const { return final.dim(0); }
  std::size_t heads() const { return final.dim(1); }
  std::uint64_t digest() const;

  friend bool operator==(const ImportanceMap&, const ImportanceMap&) = default;
};

struct ImportanceOptions {
  std::size_t batch_size = 32;
  double epsilon = kDefaultImportanceEpsilon;
  // Also record weight gradients during the sweep. The mask gradients do
  // not depend on it; the switch exists to check exactly that.
  bool track_weight_grads = false;
  // Multiplies every batch loss; used to check scale invariance.
  double loss_scale = 1.0;
};

struct RawImportance {
  Tensor raw;
  std::size_t token_count = 0;
  std::size_t sample_size = 0;
};

// For every batch: summed per-example cross-entropy, backward to the head
// mask (all ones), |grad| accumulated per head; the total is divided by the
// number of non-padding tokens in the sample.
RawImportance estimate_raw_importance(const TransformerWeights& w, std::span<const Example> sample,
                                      const ImportanceOptions& options = {});

Tensor l2_normalize(const Tensor& raw, double epsilon = kDefaultImportanceEpsilon);
// All zeros when every entry is equal.
Tensor minmax_normalize(const Tensor& values);

ImportanceMap finalize_importance(const RawImportance& raw, double epsilon = kDefaultImportanceEpsilon);

ImportanceMap compute_importance(const TransformerWeights& w, std::span<const Example> sample,
                                 const ImportanceOptions& options = {});

// Mean final importance of each block's heads.
std::vector<double> block_importance(const ImportanceMap& map);

// First min(limit, size) examples.
std::span<const Example> importance_sample(const Dataset& data,
                                           std::size_t limit = kDefaultImportanceSample);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

// CSV: one row per layer, 17 significant digits.
void export_importance_csv(const Tensor& final, const std::filesystem::path& path);
Tensor import_importance_csv(const std::filesystem::path& path);
// Binary PPM (P6) with equal RGB channels: one pixel per head, round(final*255).
void export_importance_ppm(const Tensor& final, const std::filesystem::path& path);

// Full map with metadata; the origin digest ties the map to its weights.
nlohmann::json importance_to_json(const ImportanceMap& map, std::uint64_t model_digest);
ImportanceMap importance_from_json(const nlohmann::json& j);

}  // namespace palab
