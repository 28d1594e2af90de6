#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "palab/batch.hpp"

namespace palab {

struct Example {
  std::vector<std::size_t> tokens;  // starts with kClsId
  std::size_t label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

using Dataset = std::vector<Example>;

struct DatasetSplit {
  Dataset train;
  Dataset eval;
};

// Right-pads to the longest sequence in the span.
TokenBatch make_batch(std::span<const Example> examples);
// Consecutive batches in dataset order; the last one may be short.
std::vector<TokenBatch> make_batches(const Dataset& data, std::size_t batch_size);

// ---------------------------------------------------------------------------
// Synthetic tasks
//
// Sequences are [CLS] followed by `seq_len` body tokens drawn from the
// symbol ids kFirstSymbolId .. vocab_size-1. "Symbol k" means id
// kFirstSymbolId + k.
//
//   parity            label = (count of symbol 1) mod 2
//   majority-token    body uses symbols 0..num_classes-1 only; label is the
//                     most frequent one (tied draws are rejected)
//   first-last-match  label = 1 iff the first and last body tokens agree
//   contains-pattern  label = 1 iff symbol 0 is immediately followed by
//                     symbol 1 somewhere in the body

enum class TaskKind { kParity, kMajorityToken, kFirstLastMatch, kContainsPattern };

const char* task_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::kParity;
  std::size_t seq_len = 8;
  std::size_t vocab_size = 16;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;
  std::size_t train_size = 512;
  std::size_t eval_size = 256;

  void validate() const;
};

// Label of a body under the task rule; nullopt when the body is ambiguous
// (a majority tie).
std::optional<std::size_t> synthetic_label(TaskKind kind, std::span<const std::size_t> body,
                                           std::size_t num_classes);

// Deterministic in the seed; each split is class-balanced within one.
DatasetSplit generate(const SyntheticTaskSpec& spec);

// ---------------------------------------------------------------------------
// Text ingestion

class Vocabulary {
 public:
  // [PAD]=0, [UNK]=1, [CLS]=2.
  Vocabulary();

  std::size_t add(const std::string& token);
  // kUnkId for unknown tokens.
  std::size_t id(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }

  // One "token<TAB>id" line per entry, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// Lowercased whitespace-separated words.
std::vector<std::string> tokenize(std::string_view text);
// [CLS] + word ids, truncated to max_positions tokens.
std::vector<std::size_t> encode(const Vocabulary& vocab, std::string_view text,
                                std::size_t max_positions);

struct TsvDataset {
  Dataset data;
  Vocabulary vocab;
};

// Reads "label<TAB>text" lines. Without a vocabulary one is built from this
// file; with one, unseen words map to [UNK].
TsvDataset ingest_tsv(const std::filesystem::path& path, const Vocabulary* vocab,
                      std::size_t max_positions);

}  // namespace palab
