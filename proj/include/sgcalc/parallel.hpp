#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace sgcalc {

// Parallel loops capped by SGCALC_THREADS; each index writes its own slot, so results do not depend on scheduling.

inline int thread_count() {
  static const int n = [] {
    int hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* s = std::getenv("SGCALC_THREADS")) {
      int v = std::atoi(s);
      if (v > 0) return std::min(v, hw);
    }
    return hw;
  }();
  return n;
}

template <class F>
void parallel_for(std::size_t count, F&& f) {
  const int T = std::min<std::size_t>(thread_count(), std::max<std::size_t>(1, count / 64));
  if (T <= 1) {
    for (std::size_t i = 0; i < count; ++i) f(i);
    return;
  }
  std::vector<std::thread> th;
  std::exception_ptr err;
  std::mutex m;
  for (int t = 0; t < T; ++t) {
    th.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += T) f(i);
      } catch (...) {
        std::lock_guard lk(m);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& x : th) x.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace sgcalc
