#pragma once

// Static-partition parallel loop. Each index is processed exactly once by one
// thread, so callers that write disjoint outputs stay deterministic.
// UNIBEV_THREADS caps the thread count (default: hardware concurrency).

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace unibev {

inline int max_threads() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  if (const char* env = std::getenv("UNIBEV_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1) n = std::min(n, cap);
    } catch (...) {
    }
  }
  return n;
}

template <typename F>
void parallel_for(int begin, int end, F&& body) {
  const int count = end - begin;
  if (count <= 0) return;
  const int threads = std::min(max_threads(), count);
  if (threads <= 1) {
    for (int i = begin; i < end; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    const int lo = begin + static_cast<int>(static_cast<long long>(count) * t / threads);
    const int hi = begin + static_cast<int>(static_cast<long long>(count) * (t + 1) / threads);
    pool.emplace_back([lo, hi, &body] {
      for (int i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace unibev
