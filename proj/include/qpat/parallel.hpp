#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace qpat {

// Global worker cap, settable from the CLI (--threads). Results are designed
// to be bit-identical for any value: every parallel_for writes disjoint
// outputs and all reductions happen serially in index order afterwards.
inline int& thread_count() {
  static int n = int(std::max(1u, std::thread::hardware_concurrency()));
  return n;
}

inline void set_thread_count(int n) { thread_count() = std::max(1, n); }

// Static partition of [0, n) over the worker pool; fn(i) must only touch
// state owned by index i.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const int workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::size_t lo = std::size_t(w) * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace qpat
