#include "wxgan/common.hpp"

#include <cstdlib>

namespace wxgan {

namespace {
int env_thread_count() {
  if (const char* s = std::getenv("WXGAN_THREADS")) {
    int n = std::atoi(s);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw > 16 ? 16 : hw);
}
}  // namespace

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool(env_thread_count() - 1);
  return pool;
}

ThreadPool::ThreadPool(int workers) {
  for (int i = 0; i < workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

ThreadPool::~ThreadPool() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  cv_work_.notify_all();
  for (auto& w : workers_) w.join();
}

void ThreadPool::worker_loop() {
  uint64_t seen = 0;
  for (;;) {
    Task task;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_work_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      task = task_;
    }
    for (;;) {
      int64_t begin = next_.fetch_add(task.chunk);
      if (begin >= task.n) break;
      int64_t end = begin + task.chunk < task.n ? begin + task.chunk : task.n;
      (*task.body)(begin, end);
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (--pending_ == 0) cv_done_.notify_one();
    }
  }
}

void ThreadPool::parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  int nw = int(workers_.size());
  if (nw == 0 || n == 1) {
    body(0, n);
    return;
  }
  int64_t chunk = (n + 4 * (nw + 1) - 1) / (4 * (nw + 1));
  if (chunk < 1) chunk = 1;
  {
    std::lock_guard<std::mutex> lk(mu_);
    task_ = Task{&body, chunk, n};
    next_.store(0);
    pending_ = nw;
    ++generation_;
  }
  cv_work_.notify_all();
  // caller participates
  for (;;) {
    int64_t begin = next_.fetch_add(chunk);
    if (begin >= n) break;
    int64_t end = begin + chunk < n ? begin + chunk : n;
    body(begin, end);
  }
  std::unique_lock<std::mutex> lk(mu_);
  cv_done_.wait(lk, [&] { return pending_ == 0; });
}

}  // namespace wxgan
