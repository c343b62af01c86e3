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

#pragma once

#include <functional>
#include <thread>
#include <vector>

#include "iseg/core/common.hpp"

namespace iseg {

/// Process-wide worker count for per-subject parallelism (CLI --jobs).
/// Kernels themselves stay single-threaded per call; outputs depend only on
/// inputs and loop index, so any job count gives identical results.
int parallel_jobs();
void set_parallel_jobs(int jobs);

/// Run fn(i) for i in [0, n). Exceptions from workers are rethrown (first one
/// wins). Results must not depend on execution order.
void parallel_for(i64 n, const std::function<void(i64)>& fn);

}  // namespace iseg
