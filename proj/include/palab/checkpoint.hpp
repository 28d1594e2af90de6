#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "json.hpp"
#include "palab/lora.hpp"
#include "palab/model.hpp"

namespace palab {

// File layout:
//   "PALABCKP"            8 bytes
//   version               u32 little-endian (1)
//   reserved              u32 (0)
//   manifest length       u64
//   manifest              UTF-8 JSON
//   zero padding          to a multiple of 8 bytes
//   tensor data           little-endian f64, at the manifest offsets
//
// The manifest names every tensor with its shape, element offset and count,
// and embeds the model config, per-block head index map and merge count.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ModelCheckpoint {
  TransformerWeights weights;
  std::optional<HeadMask> mask;
};

void save_model(const std::filesystem::path& path, const TransformerWeights& w,
                const HeadMask* mask = nullptr);
ModelCheckpoint load_model(const std::filesystem::path& path);

// Adapters carry their rank plan, scaling and seed; `base_digest` records
// the weights they were trained against.
void save_adapters(const std::filesystem::path& path, const LoraAdapters& adapters,
                   std::uint64_t base_digest);
struct AdapterCheckpoint {
  LoraAdapters adapters;
  std::uint64_t base_digest = 0;
};
AdapterCheckpoint load_adapters(const std::filesystem::path& path);

// Manifest only, without reading tensor data.
nlohmann::json read_manifest(const std::filesystem::path& path);

}  // namespace palab
