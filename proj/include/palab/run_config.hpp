#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "palab/data.hpp"
#include "palab/model.hpp"
#include "palab/training.hpp"

namespace palab {

/// Every knob of a pipeline run, read from one flat JSON object.
///
/// "preset" ("toy" or "reference") picks the starting model geometry; the
/// other model keys override it. Unknown keys are rejected. Paths are
/// resolved relative to the config file.
struct RunConfig {
  std::string preset = "toy";
  ModelConfig model;
  std::uint64_t seed = 0;

  // Data: a synthetic task unless train_tsv is set.
  SyntheticTaskSpec task;
  std::optional<std::filesystem::path> train_tsv;
  std::optional<std::filesystem::path> eval_tsv;
  std::optional<std::filesystem::path> vocab;

  std::size_t importance_sample = 512;
  double importance_epsilon = 1e-12;
  std::size_t importance_batch = 32;

  std::size_t keep_count = 0;  // 0 keeps every head
  std::string prune_mode = "slice";

  TrainConfig train;

  // Inputs of later pipeline stages; empty means "look in the output dir".
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> adapters;
  std::optional<std::filesystem::path> importance;

  std::filesystem::path out_dir = "out";

  // Seeds every derived component (model init, data, adapters, shuffling).
  void set_seed(std::uint64_t s);
  void validate() const;
};

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

// Train/eval split for the run: synthetic generation or TSV ingestion.
DatasetSplit load_data(const RunConfig& config);

}  // namespace palab
