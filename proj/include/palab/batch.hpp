#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace palab {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr std::size_t kClsId = 2;
inline constexpr std::size_t kFirstSymbolId = 3;

/// Right-padded batch of token sequences, row-major [batch_size, seq_len].
struct TokenBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> token_ids;
  std::vector<std::uint8_t> attention_mask;  // 1 for real tokens, a prefix of each row
  std::vector<std::size_t> labels;

  // Real (non-padding) tokens in the batch.
  std::size_t token_count() const;
  // Sizes agree, masks are 0/1 prefixes, every row has at least one token.
  void validate() const;
};

}  // namespace palab
