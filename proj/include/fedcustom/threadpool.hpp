// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace fedcustom {

// Index-parallel loop helper. Work items must be independent; callers
// collect per-index results and reduce them in index order, so parallel and
// serial execution produce identical bytes. Threads are spawned per call,
// which is cheap next to the numeric work they carry here.
class ThreadPool {
 public:
  explicit ThreadPool(int threads) : threads_(threads < 1 ? 1 : threads) {}

  int size() const { return threads_; }

  void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) const {
    if (n <= 0) return;
    const int workers = static_cast<int>(n < threads_ ? n : threads_);
    if (workers <= 1) {
      for (int64_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::atomic<int64_t> next{0};
    auto drain = [&] {
      while (true) {
        const int64_t i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
    };
    std::vector<std::thread> extra;
    extra.reserve(static_cast<size_t>(workers) - 1);
    for (int w = 0; w < workers - 1; ++w) extra.emplace_back(drain);
    drain();
    for (auto& t : extra) t.join();
  }

  // Process-wide pool; size from FEDCUSTOM_THREADS or hardware concurrency.
  static const ThreadPool& global();

 private:
  int threads_;
};

}  // namespace fedcustom
