#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace calibkd {

/// Worker count for intra-op parallelism: hardware concurrency, capped by
/// the CALIBKD_THREADS environment variable when set.
inline std::size_t thread_count() {
  static const std::size_t count = [] {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CALIBKD_THREADS")) {
      try {
        long cap = std::stol(env);
        if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
      } catch (...) {
      }
    }
    return n;
  }();
  return count;
}

/// Runs fn(begin, end) over disjoint chunks of [0, n). Chunks write disjoint
/// outputs, so results do not depend on the worker count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_chunk = 1) {
  std::size_t workers = std::min(thread_count(), (n + min_chunk - 1) / std::max<std::size_t>(min_chunk, 1));
  if (workers <= 1 || n <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::size_t step = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t begin = w * step;
    std::size_t end = std::min(n, begin + step);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(std::size_t{0}, std::min(n, step));
  for (auto& t : pool) t.join();
}

}  // namespace calibkd
