#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gift {

// Error taxonomy. Everything user-visible derives from gift::error so the
// CLI can catch one type and print a single-line message.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct shape_error : error {
  using error::error;
};
struct index_error : error {
  using error::error;
};
struct config_error : error {
  using error::error;
};
struct contract_error : error {
  using error::error;
};
struct numeric_error : error {
  using error::error;
};
struct schema_error : error {
  using error::error;
};
struct io_error : error {
  using error::error;
};

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace gift
