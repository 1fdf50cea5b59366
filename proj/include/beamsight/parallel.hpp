#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace beamsight {

namespace detail {
inline std::atomic<std::size_t>& worker_cap() {
  static std::atomic<std::size_t> cap{std::max(1u, std::thread::hardware_concurrency())};
  return cap;
}
// Set on worker threads so nested loops run inline instead of spawning more threads.
inline thread_local bool in_parallel_region = false;
}  // namespace detail

/// Upper bound on threads used by any kernel. One worker means deterministic mode.
inline std::size_t workers() { return detail::worker_cap().load(); }
inline void set_workers(std::size_t n) { detail::worker_cap().store(std::max<std::size_t>(1, n)); }
inline bool deterministic_mode() { return workers() == 1; }

/// Runs fn(i) for i in [begin, end) over contiguous chunks. Callers must only
/// write to output regions owned by index i, so results never depend on the
/// worker count.
template <typename Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn, std::size_t min_chunk = 1) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t max_threads = std::min(workers(), (n + min_chunk - 1) / min_chunk);
  if (max_threads <= 1 || detail::in_parallel_region) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  const std::size_t chunk = (n + max_threads - 1) / max_threads;
  std::vector<std::thread> threads;
  std::exception_ptr error;
  std::mutex error_mutex;
  threads.reserve(max_threads);
  for (std::size_t t = 0; t < max_threads; ++t) {
    const std::size_t lo = begin + t * chunk;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&, lo, hi] {
      detail::in_parallel_region = true;
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace beamsight
