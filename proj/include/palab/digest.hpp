#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace palab {

/// 64-bit FNV-1a, used to tie derived artifacts (importance maps, prune
/// plans) to the exact weights or map they were computed from.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  void update(std::span<const double> values);
  void update(std::uint64_t value);
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(std::uint64_t digest);
std::uint64_t parse_digest_hex(std::string_view text);

}  // namespace palab
