#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cdface {

/// Violation of an operation's contract (bad shapes, invalid arguments,
/// broken invariants). Maps to CLI exit code 1.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem / parsing / configuration failure. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void require_io(bool cond, const std::string& msg) {
  if (!cond) throw IoError(msg);
}

/// FNV-1a over a byte stream; used for array checksums and frozen-parameter
/// hashes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ull;
    }
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

}  // namespace cdface
