#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace fsda {

// Streaming FNV-1a, used for content hashes of frozen artifacts and for
// stage-cache keys. Not cryptographic.
class Hasher {
 public:
  Hasher& update(std::string_view bytes) {
    for (const char c : bytes) {
      state_ ^= static_cast<unsigned char>(c);
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  Hasher& update(double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    __builtin_memcpy(&bits, &v, sizeof(bits));
    return update_u64(bits);
  }

  Hasher& update_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      state_ ^= (v >> (8 * i)) & 0xff;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_to_hex(std::uint64_t h);

}  // namespace fsda
