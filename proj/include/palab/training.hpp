#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "palab/data.hpp"
#include "palab/importance.hpp"
#include "palab/kernels.hpp"
#include "palab/lora.hpp"
#include "palab/model.hpp"
#include "palab/pruning.hpp"

namespace palab {

enum class Regime { kFullFinetune, kLora, kPruneLora };

const char* regime_name(Regime regime);
Regime parse_regime(std::string_view name);

struct TrainConfig {
  Regime regime = Regime::kFullFinetune;
  std::size_t epochs = 30;
  double learning_rate = 2e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // prune_lora only; 0 keeps every head.
  std::size_t keep_count = 0;
  std::size_t n_high = 4;
  std::size_t rank_high = 8;
  std::size_t rank_low = 4;
  std::size_t importance_sample = kDefaultImportanceSample;
  double importance_epsilon = kDefaultImportanceEpsilon;
  // Evaluate after every eval_every-th epoch and after the last one.
  std::size_t eval_every = 1;
  // Stop after this many optimizer steps when nonzero.
  std::size_t max_steps = 0;

  void validate() const;
};

/// A tensor the optimizer updates, with its dotted name.
struct Trainable {
  std::string name;
  Tensor* tensor;
};

/// Sets requires_grad on exactly the tensors the regime trains and clears
/// it everywhere else. full_finetune trains every weight; the adapter
/// regimes train all LayerNorm gains and biases, every adapter matrix and
/// the classifier.
std::vector<Trainable> freeze_policy(TransformerWeights& w, LoraAdapters* adapters, Regime regime);

struct AdamWOptions {
  double learning_rate = 2e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay. Moments are kept per tensor in the
/// order of the list passed to the first step().
class AdamW {
 public:
  explicit AdamW(AdamWOptions options) : options_(options) {}

  // Tensors without a gradient buffer are treated as having zero gradient.
  void step(const std::vector<Trainable>& params);
  std::size_t steps() const { return step_; }

 private:
  AdamWOptions options_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> eval_accuracy;
  std::size_t steps = 0;
  double seconds = 0.0;
};

struct TrainReport {
  Regime regime = Regime::kFullFinetune;
  double initial_eval_accuracy = 0.0;
  std::vector<EpochRecord> epochs;
  double final_accuracy = 0.0;
  std::size_t steps = 0;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::size_t kept_heads = 0;
  std::optional<RankPlan> rank_plan;
};

// Timings are excluded unless requested, so the JSON is reproducible.
nlohmann::json to_json(const TrainReport& report, bool include_timing = false);

struct TrainResult {
  TrainReport report;
  TransformerWeights weights;
  std::optional<LoraAdapters> adapters;
  std::optional<ImportanceMap> importance;
  std::optional<PrunePlan> plan;
};

// Called after every epoch (progress output).
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs one regime end to end. prune_lora: importance on the training set,
/// keep the top keep_count heads, slice-prune, rank plan from block
/// importance, inject adapters, train. lora: the same without pruning.
TrainResult train(const TransformerWeights& initial, const TrainConfig& config,
                  const DatasetSplit& data, const EpochCallback& on_epoch = {});

double evaluate_accuracy(const TransformerWeights& w, const Dataset& data, std::size_t batch_size,
                         const LoraAdapters* adapters = nullptr);
std::vector<std::size_t> predict(const TransformerWeights& w, const Dataset& data, std::size_t batch_size,
                                 const LoraAdapters* adapters = nullptr);

}  // namespace palab
