#pragma once

#include <cstdint>
#include <functional>

namespace slrf {

// Process-wide worker pool. All loops partition their output disjointly per
// worker, so results do not depend on the pool size.
class ThreadPool {
 public:
  static ThreadPool& instance();

  void resize(int workers);  // <= 0 -> hardware_concurrency
  int size() const { return workers_; }

  // fn(begin, end) over disjoint chunks of [0, n)
  void parallel_for(int64_t n, int64_t grain,
                    const std::function<void(int64_t, int64_t)>& fn);

  // fn(i) for i in [0, n), dynamically scheduled
  void parallel_tasks(int64_t n, const std::function<void(int64_t)>& fn);

 private:
  ThreadPool();
  ~ThreadPool();
  struct Impl;
  Impl* impl_;
  int workers_;
};

void set_thread_count(int workers);
int thread_count();

}  // namespace slrf
