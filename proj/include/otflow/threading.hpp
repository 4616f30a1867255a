#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace otflow {

inline int& worker_thread_count() {
  static int n = 1;
  return n;
}

inline void set_worker_threads(int n) { worker_thread_count() = std::max(1, n); }

// Static block partition over [0, n). Callers write to disjoint slots only,
// so results are identical for any thread count; reductions happen afterwards
// in index order.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t nt =
      std::min<std::size_t>(static_cast<std::size_t>(worker_thread_count()),
                            n == 0 ? 1 : n);
  if (nt <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t chunk = (n + nt - 1) / nt;
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace otflow
