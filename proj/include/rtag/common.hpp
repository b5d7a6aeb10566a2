// include/rtag/common.hpp
//
// Shared error types, logging, and small utilities used across the library.
#pragma once

#include <cstdint>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace rtag {

// Errors are grouped so the CLI can map them onto distinct exit codes:
// DataError   -> malformed/stale/corrupt inputs (files, schemas, checksums)
// DomainError -> arguments outside the documented domain (shapes, indices, ranges)
// NumericError-> non-finite values or numerically invalid operations
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------- logging ----------------
// Minimal stderr logger; verbosity 0 = warnings only, 1 = info, 2 = debug.
inline int& log_verbosity() {
  static int level = 0;
  return level;
}

inline void log_warn(const std::string& msg) { std::cerr << "[warn] " << msg << "\n"; }

inline void log_info(const std::string& msg) {
  if (log_verbosity() >= 1) std::cerr << "[info] " << msg << "\n";
}

// ---------------- string helpers ----------------
template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

// FNV-1a 64-bit hash, used for dataset/model fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

}  // namespace rtag
