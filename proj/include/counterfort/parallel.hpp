#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace counterfort {

namespace detail {
inline std::atomic<std::size_t>& max_threads_slot() {
  static std::atomic<std::size_t> slot{0};
  return slot;
}
}  // namespace detail

/// Upper bound on worker threads for library-internal fan-out. 0 selects
/// std::thread::hardware_concurrency().
inline void set_max_threads(std::size_t n) { detail::max_threads_slot().store(n); }

inline std::size_t max_threads() {
  const std::size_t n = detail::max_threads_slot().load();
  if (n != 0) return n;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for every i in [0, count). Work items must write to disjoint
/// outputs; callers reduce in index order afterwards, so results never depend
/// on the thread count. The first exception thrown by any item is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(max_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(body);
    body();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace counterfort
