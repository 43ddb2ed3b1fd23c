// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace recnet {

namespace detail {
inline std::atomic<bool> &deterministic_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
} // namespace detail

/// Forces single-threaded execution of every kernel.
inline void set_deterministic(bool on) { detail::deterministic_flag() = on; }
inline bool deterministic() { return detail::deterministic_flag(); }

/// Worker count from RECNET_THREADS (default: hardware concurrency).
inline std::size_t thread_count() {
  if (deterministic())
    return 1;
  if (const char *env = std::getenv("RECNET_THREADS")) {
    char *end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0)
      return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Splits [0, count) into contiguous chunks. Each index is visited by exactly one
/// worker, so kernels that own their output slots stay bit-reproducible.
template <typename Fn> void parallel_for(std::size_t count, Fn &&fn) {
  const std::size_t workers = std::min(thread_count(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i)
      fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t t = 0; t < workers; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin >= end)
      break;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t i = begin; i < end; ++i)
        fn(i);
    });
  }
  for (auto &th : pool)
    th.join();
}

} // namespace recnet
