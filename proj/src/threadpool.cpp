// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/threadpool.hpp"

#include <cstdlib>

namespace fedcustom {

const ThreadPool& ThreadPool::global() {
  static ThreadPool pool = [] {
    int n = 0;
    if (const char* env = std::getenv("FEDCUSTOM_THREADS")) n = std::atoi(env);
    if (n < 1) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    return ThreadPool(n);
  }();
  return pool;
}

}  // namespace fedcustom
