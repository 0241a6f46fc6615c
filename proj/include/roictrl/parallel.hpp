#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace roictrl {

namespace detail {
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Worker count used by parallel_for. 1 (the default) runs everything inline.
inline void set_num_threads(int n) { detail::thread_count().store(std::max(1, n)); }
inline int num_threads() { return detail::thread_count().load(); }

/// Runs fn(i) for i in [0, count). Each index is visited exactly once; callers
/// must only write to index-private state so results do not depend on the
/// worker count.
template <class Fn>
void parallel_for(std::int64_t count, Fn&& fn) {
  const int workers = static_cast<int>(std::min<std::int64_t>(num_threads(), count));
  if (workers <= 1) {
    for (std::int64_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::int64_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace roictrl
