#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace so3flow {

/// Worker count for `requested` (0 means all hardware threads).
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

/**
 * @brief Runs fn(chunk, begin, end) over [0, n) split into fixed-size chunks.
 *
 * The chunking depends only on n and chunk_size, never on the thread count,
 * so callers that write per-chunk results and reduce them in chunk order get
 * identical output for any number of threads. The first exception thrown by
 * a chunk is rethrown after all workers finish.
 */
inline void parallel_chunks(std::size_t n, std::size_t chunk_size, int threads,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  chunk_size = std::max<std::size_t>(1, chunk_size);
  const std::size_t chunks = (n + chunk_size - 1) / chunk_size;
  const std::size_t workers = std::min<std::size_t>(chunks, static_cast<std::size_t>(resolve_threads(threads)));
  auto run = [&](std::size_t c) { fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size)); };
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
    return;
  }
  std::mutex mutex;
  std::exception_ptr error;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t c;
      {
        std::lock_guard lock(mutex);
        if (next >= chunks || error) return;
        c = next++;
      }
      try {
        run(c);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace so3flow
