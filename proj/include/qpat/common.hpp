#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qpat {

// Thrown when a cached object (e.g. a factorization) no longer matches the
// inputs it was built from.
class InvalidState : public std::logic_error {
 public:
  explicit InvalidState(const std::string& msg) : std::logic_error(msg) {}
};

// Linear-algebra level failures: factorization breakdown, singular systems.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values encountered during network training / inference.
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a over a byte string; used to stamp configs into output files.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace qpat
