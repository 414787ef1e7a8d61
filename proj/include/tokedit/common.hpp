#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokedit {

// Error taxonomy. The CLI maps these onto exit codes, so new failure modes
// should reuse one of the existing categories where possible.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct VocabError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct PlacementError : Error {
  using Error::Error;
};
struct DependencyError : Error {
  using Error::Error;
};

inline std::string format_str(const char* fmt) { return std::string(fmt); }

template <typename... Args>
std::string format_str(const char* fmt, Args... args) {
  int n = std::snprintf(nullptr, 0, fmt, args...);
  std::string out(static_cast<size_t>(n), '\0');
  std::snprintf(out.data(), out.size() + 1, fmt, args...);
  return out;
}

#define TOKEDIT_CHECK(cond, exc, ...)                  \
  do {                                                 \
    if (!(cond)) throw exc(format_str(__VA_ARGS__));   \
  } while (0)

// FNV-1a, used for provenance hashes on checkpoints/configs.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; i++) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) { return format_str("%016llx", (unsigned long long)h); }

}  // namespace tokedit
