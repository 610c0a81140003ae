// Copyright (c) the perco-micro Authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pcm {

// Exit-code mapping used by the CLI: usage 2, data/format 3, numeric 4.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline int& thread_cap_storage() {
  static int cap = [] {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("PERCO_MICRO_THREADS")) {
      char* end = nullptr;
      long v = std::strtol(env, &end, 10);
      if (end != env && v >= 1) n = std::min<long>(v, 256);
    }
    return n;
  }();
  return cap;
}
}  // namespace detail

inline int worker_threads() { return detail::thread_cap_storage(); }
inline void set_worker_threads(int n) { detail::thread_cap_storage() = std::max(1, n); }

// Fork-join over [0, n). Each index is handled by exactly one worker and no
// partial results are combined across workers, so outputs are identical for
// any thread count.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  if (n <= 0) return;
  const int workers = static_cast<int>(std::min<std::int64_t>(worker_threads(), n));
  if (workers <= 1 || n < 512) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::int64_t i = 0; i < std::min<std::int64_t>(chunk, n); ++i) fn(i);
  for (auto& t : pool) t.join();
}

// Debug-mode tensor guard: when enabled, ops assert their outputs are finite.
inline bool& finite_guard() {
  static bool enabled = false;
  return enabled;
}

template <typename Real>
void check_finite(const std::vector<Real>& v, const char* what) {
  if (!finite_guard()) return;
  for (const Real x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError(std::string("non-finite value produced by ") + what);
  }
}

}  // namespace pcm
