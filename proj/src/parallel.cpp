#include "slrf/parallel.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

#include "slrf/common.hpp"

namespace slrf {

double Rng::next_normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0, u2 = 0.0;
  do {
    u1 = next_double();
    u2 = next_double();
  } while (u1 <= 1e-12);
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

struct ThreadPool::Impl {
  std::vector<std::thread> threads;
  std::mutex mu;
  std::condition_variable cv_work, cv_done;
  std::function<void(int64_t, int64_t)> range_fn;
  std::function<void(int64_t)> task_fn;
  std::atomic<int64_t> next_task{0};
  int64_t n_items = 0;
  int64_t chunk = 0;
  int n_chunks = 0;
  uint64_t epoch = 0;
  int active = 0;
  bool stop = false;

  void worker() {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu);
      cv_work.wait(lk, [&] { return stop || epoch != seen; });
      if (stop) return;
      seen = epoch;
      lk.unlock();
      run_share();
      lk.lock();
      if (--active == 0) cv_done.notify_all();
    }
  }

  void run_share() {
    for (;;) {
      int64_t t = next_task.fetch_add(1, std::memory_order_relaxed);
      if (t >= n_chunks) break;
      if (range_fn) {
        int64_t b = t * chunk;
        int64_t e = std::min<int64_t>(n_items, b + chunk);
        if (b < e) range_fn(b, e);
      } else {
        task_fn(t);
      }
    }
  }

  void launch(int helpers) {
    {
      std::lock_guard<std::mutex> lk(mu);
      active = helpers;
      ++epoch;
    }
    cv_work.notify_all();
    run_share();
    std::unique_lock<std::mutex> lk(mu);
    cv_done.wait(lk, [&] { return active == 0; });
    range_fn = nullptr;
    task_fn = nullptr;
  }
};

ThreadPool::ThreadPool() : impl_(new Impl), workers_(0) {
  resize(0);
}

ThreadPool::~ThreadPool() {
  {
    std::lock_guard<std::mutex> lk(impl_->mu);
    impl_->stop = true;
  }
  impl_->cv_work.notify_all();
  for (auto& t : impl_->threads) t.join();
  delete impl_;
}

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool;
  return pool;
}

void ThreadPool::resize(int workers) {
  if (workers <= 0) {
    unsigned hc = std::thread::hardware_concurrency();
    workers = hc == 0 ? 1 : static_cast<int>(hc);
  }
  if (workers == workers_) return;
  // drain old helpers
  {
    std::lock_guard<std::mutex> lk(impl_->mu);
    impl_->stop = true;
  }
  impl_->cv_work.notify_all();
  for (auto& t : impl_->threads) t.join();
  impl_->threads.clear();
  impl_->stop = false;
  workers_ = workers;
  for (int i = 0; i + 1 < workers; ++i)
    impl_->threads.emplace_back([this] { impl_->worker(); });
}

void ThreadPool::parallel_for(int64_t n, int64_t grain,
                              const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  if (workers_ == 1 || n <= grain) {
    fn(0, n);
    return;
  }
  int64_t chunks = std::min<int64_t>((n + grain - 1) / grain,
                                     static_cast<int64_t>(workers_) * 4);
  impl_->range_fn = fn;
  impl_->n_items = n;
  impl_->chunk = (n + chunks - 1) / chunks;
  impl_->n_chunks = static_cast<int>((n + impl_->chunk - 1) / impl_->chunk);
  impl_->next_task.store(0, std::memory_order_relaxed);
  impl_->launch(static_cast<int>(impl_->threads.size()));
}

void ThreadPool::parallel_tasks(int64_t n, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  if (workers_ == 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  impl_->task_fn = fn;
  impl_->n_chunks = static_cast<int>(n);
  impl_->next_task.store(0, std::memory_order_relaxed);
  impl_->launch(static_cast<int>(impl_->threads.size()));
}

void set_thread_count(int workers) { ThreadPool::instance().resize(workers); }
int thread_count() { return ThreadPool::instance().size(); }

}  // namespace slrf
