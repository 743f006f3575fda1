#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "xsurv/tensor.hpp"

namespace xsurv {

// Worker cap from XSURV_THREADS; hardware concurrency when unset.
inline int worker_count() {
  if (const char* e = std::getenv("XSURV_THREADS"); e && *e) {
    char* end = nullptr;
    const long n = std::strtol(e, &end, 10);
    if (*end != '\0' || n < 1) throw Error(std::string("XSURV_THREADS must be a positive integer, got '") + e + "'");
    return static_cast<int>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Calls fn(i) for i in [0, n) on up to `workers` threads. Items are
// independent, so results written by index do not depend on scheduling.
// The first exception is rethrown after all workers stop.
template <typename F>
void parallel_for(int64_t n, F&& fn, int workers = worker_count()) {
  workers = static_cast<int>(std::min<int64_t>(std::max(workers, 1), std::max<int64_t>(n, 1)));
  if (workers == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr err;
  std::mutex mu;
  const auto work = [&] {
    for (int64_t i; !failed && (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!err) err = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace xsurv
