/*
 * isoseg - 8-tissue infant brain segmentation with domain adaptation
 *
 * Copyright 2026 the isoseg authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "iseg/core/parallel.hpp"

#include <atomic>
#include <exception>
#include <mutex>

namespace iseg {

namespace {
int g_jobs = 1;
}

int parallel_jobs() { return g_jobs; }

void set_parallel_jobs(int jobs) {
  require(jobs >= 1, "set_parallel_jobs: jobs must be >= 1");
  g_jobs = jobs;
}

void parallel_for(i64 n, const std::function<void(i64)>& fn) {
  if (n <= 0) return;
  const int jobs = int(std::min<i64>(g_jobs, n));
  if (jobs <= 1) {
    for (i64 i = 0; i < n; ++i) fn(i);
    return;
  }

  std::atomic<i64> next{0};
  std::exception_ptr err;
  std::mutex err_mutex;

  auto worker = [&]() {
    for (;;) {
      const i64 i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(jobs - 1);
  for (int t = 1; t < jobs; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace iseg
