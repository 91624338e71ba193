#ifndef LDTE_SRC_PARALLEL_HPP
#define LDTE_SRC_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace ldte::detail {

// Runs body(0..count-1) on up to `workers` threads. The first exception by
// index is rethrown after all threads join.
template <typename F>
void parallel_for(int count, int workers, F&& body) {
  workers = std::clamp(workers, 1, std::max(1, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace ldte::detail

#endif  // LDTE_SRC_PARALLEL_HPP
