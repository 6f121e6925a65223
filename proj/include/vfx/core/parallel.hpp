#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "vfx/core/error.hpp"

namespace vfx {

// Worker cap from VFX_NUM_WORKERS; 1 when unset.
inline int num_workers() {
  const char* env = std::getenv("VFX_NUM_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ValidationError("VFX_NUM_WORKERS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<int>(std::min<long>(n, 256));
}

// Runs fn(i) for i in [0, n). Jobs must not depend on execution order; the
// first exception thrown by any job is rethrown.
template <class Fn>
void parallel_for(int n, Fn fn, int workers = num_workers()) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i; !failed && (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace vfx
