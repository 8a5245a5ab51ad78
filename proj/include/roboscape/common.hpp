#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rs {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy: invalid arguments / contract violations vs. runtime failures
// (I/O, corrupt files, numerical blowups). CLI maps these to exit codes 1 / 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::string format(const char* msg) { return std::string(msg); }

template <class... A>
inline std::string format(const char* fmt, A... args) {
  char buf[1024];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return std::string(buf);
}
}  // namespace detail

#define RS_CHECK(cond, ...)                                     \
  do {                                                          \
    if (!(cond)) throw ::rs::UsageError(::rs::detail::format(__VA_ARGS__)); \
  } while (0)

#define RS_FAIL_IF(cond, ...)                                   \
  do {                                                          \
    if (cond) throw ::rs::RuntimeFailure(::rs::detail::format(__VA_ARGS__)); \
  } while (0)

// FNV-1a, used for checkpoint/blob integrity and run manifests.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace rs
