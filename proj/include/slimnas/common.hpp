// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace slimnas {

// Error taxonomy. The CLI maps these onto exit codes, everything else
// just throws and lets the caller decide.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid shapes, choices, keys, or arguments.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf escaped a kernel. Finite-in implies finite-out is a contract.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// API called in the wrong order (e.g. optimizer step before backward).
struct StateError : Error {
  explicit StateError(const std::string& msg) : Error(msg) {}
};

// Unreadable or inconsistent input data.
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Malformed checkpoint / table / report file.
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

enum class ScalarType { f32, f64 };

template <typename T>
constexpr ScalarType scalar_type_of();
template <>
constexpr ScalarType scalar_type_of<float>() { return ScalarType::f32; }
template <>
constexpr ScalarType scalar_type_of<double>() { return ScalarType::f64; }

inline const char* scalar_type_name(ScalarType t) {
  return t == ScalarType::f32 ? "float32" : "float64";
}

enum class Activation { gelu, relu };

inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation: " + s);
}

inline const char* activation_name(Activation a) {
  return a == Activation::gelu ? "gelu" : "relu";
}

// Deterministic RNG. mt19937_64 has a pinned bit stream; the variate
// transforms below are hand-rolled so results do not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_(split(seed)), t_(split(seed ^ 0x9e3779b97f4a7c15ull)) {}

  uint64_t next_u64() {
    // xorshift128+, seeded via splitmix64
    uint64_t x = s_;
    const uint64_t y = t_;
    s_ = y;
    x ^= x << 23;
    t_ = x ^ y ^ (x >> 17) ^ (y >> 26);
    return t_ + y;
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller without the cached spare, so the draw count per call is fixed.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Rejection-sampled truncation at +-2 std.
  double truncated_normal(double std) {
    for (;;) {
      const double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * std;
    }
  }

 private:
  static uint64_t split(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  uint64_t s_;
  uint64_t t_;
};

}  // namespace slimnas
