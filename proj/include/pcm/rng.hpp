// Copyright (c) the perco-micro Authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace pcm {

// splitmix64; used to derive independent stream seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic generator: mt19937_64 is bit-pinned by the standard and the
// distributions below are hand-rolled, so sequences are reproducible across
// implementations. Serializable for bit-exact training resume.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    // 53 random bits -> double, the usual construction.
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [lo, hi] via rejection-free Lemire-style reduction is
  // overkill here; modulo bias is irrelevant for the ranges we use, but keep
  // it exact anyway with rejection sampling.
  std::uint64_t uniform_int(std::uint64_t bound) {  // [0, bound)
    if (bound == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  int uniform_int(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Standard normal via Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t raw() { return engine_(); }

  // Textual state, standard-defined for mt19937_64.
  std::string serialize() const {
    std::ostringstream os;
    os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
    os.precision(17);
    os << spare_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    int spare_flag = 0;
    is >> engine_ >> spare_flag >> spare_;
    has_spare_ = spare_flag != 0;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pcm
