#pragma once

#include <cstddef>
#include <memory>

#include <oneapi/tbb/blocked_range.h>
#include <oneapi/tbb/parallel_for.h>
#include <oneapi/tbb/task_arena.h>

#include "psi3d/errors.hpp"

namespace psi3d {

/// Runs index loops on a fixed-size worker arena. Work items must write only
/// to their own slots; results are then independent of the thread count.
class ParallelRunner {
 public:
  explicit ParallelRunner(std::size_t threads = 1) : threads_(threads == 0 ? 1 : threads) {
    if (threads_ > 1) arena_ = std::make_unique<oneapi::tbb::task_arena>(static_cast<int>(threads_));
  }

  std::size_t threads() const noexcept { return threads_; }

  template <class Fn>
  void for_each(std::size_t n, Fn&& fn) const {
    if (!arena_ || n <= 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    arena_->execute([&] {
      oneapi::tbb::parallel_for(oneapi::tbb::blocked_range<std::size_t>(0, n),
                                [&](const oneapi::tbb::blocked_range<std::size_t>& r) {
                                  for (std::size_t i = r.begin(); i != r.end(); ++i) fn(i);
                                });
    });
  }

 private:
  std::size_t threads_;
  std::unique_ptr<oneapi::tbb::task_arena> arena_;
};

}  // namespace psi3d
