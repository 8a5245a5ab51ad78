#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace rs {

// Persistent worker pool driving parallel_for. Work is split into fixed
// contiguous ranges so results never depend on scheduling or thread count;
// every floating-point reduction in the library happens in index order.
// Nested calls run inline on the calling thread.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  // 1 = run everything inline on the caller.
  void set_threads(int n) {
    std::lock_guard<std::mutex> lk(dispatch_mu_);
    shutdown_workers();
    n_threads_ = n < 1 ? 1 : n;
    spawn_workers();
  }

  int threads() const { return n_threads_; }

  // fn(begin, end) over a static partition of [0, n).
  void parallel_ranges(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (n_threads_ <= 1 || n == 1 || busy_) {
      fn(0, n);
      return;
    }
    std::lock_guard<std::mutex> dlk(dispatch_mu_);
    const int parts = static_cast<int>(std::min<int64_t>(n_threads_, n));
    {
      std::lock_guard<std::mutex> lk(mu_);
      task_ = &fn;
      task_n_ = n;
      task_chunk_ = (n + parts - 1) / parts;
      task_parts_ = parts;
      claimed_ = 0;
      done_ = 0;
    }
    cv_.notify_all();
    const bool was_busy = busy_;
    busy_ = true;
    run_available();  // caller participates
    busy_ = was_busy;
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return done_ == task_parts_; });
    task_ = nullptr;
  }

  ~ThreadPool() {
    std::lock_guard<std::mutex> lk(dispatch_mu_);
    shutdown_workers();
  }

 private:
  ThreadPool() : n_threads_(1) {}

  void spawn_workers() {
    stop_ = false;
    for (int i = 1; i < n_threads_; ++i) {
      workers_.emplace_back([this] {
        busy_ = true;
        while (true) {
          {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [&] { return stop_ || (task_ && claimed_ < task_parts_); });
            if (stop_) return;
          }
          run_available();
        }
      });
    }
  }

  void shutdown_workers() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  // Claim parts under the lock, execute outside it.
  void run_available() {
    while (true) {
      const std::function<void(int64_t, int64_t)>* fn;
      int64_t b, e;
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (!task_ || claimed_ >= task_parts_) return;
        const int part = claimed_++;
        fn = task_;
        b = static_cast<int64_t>(part) * task_chunk_;
        e = std::min(task_n_, b + task_chunk_);
      }
      (*fn)(b, e);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (++done_ == task_parts_) done_cv_.notify_all();
      }
    }
  }

  static thread_local bool busy_;

  int n_threads_;
  std::vector<std::thread> workers_;
  std::mutex dispatch_mu_;  // one dispatch at a time
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  bool stop_ = false;
  const std::function<void(int64_t, int64_t)>* task_ = nullptr;
  int64_t task_n_ = 0, task_chunk_ = 0;
  int task_parts_ = 0;
  int claimed_ = 0;
  int done_ = 0;
};

inline thread_local bool ThreadPool::busy_ = false;

template <class F>
inline void parallel_for(int64_t n, F&& body) {
  // body(i) per index; partitioned into contiguous ranges.
  const std::function<void(int64_t, int64_t)> fn = [&body](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) body(i);
  };
  ThreadPool::instance().parallel_ranges(n, fn);
}

}  // namespace rs
