#include "palab/digest.hpp"

#include <bit>
#include <charconv>
#include <cstring>

#include "palab/errors.hpp"

namespace palab {

void Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    hash_ ^= static_cast<std::uint64_t>(b);
    hash_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }

void Fnv1a::update(std::uint64_t value) {
  std::byte buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::byte>((value >> (8 * i)) & 0xff);
  update(std::span<const std::byte>(buf, 8));
}

void Fnv1a::update(std::span<const double> values) {
  for (double v : values) update(std::bit_cast<std::uint64_t>(v));
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  static constexpr char kHex[] = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = kHex[digest & 0xf];
    digest >>= 4;
  }
  buf[16] = '\0';
  return buf;
}

std::uint64_t parse_digest_hex(std::string_view text) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out, 16);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.size() != 16) {
    throw FormatError("malformed digest '" + std::string(text) + "'");
  }
  return out;
}

}  // namespace palab
