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

#include "iseg/kernels/kernels.hpp"

namespace iseg::kern {

/// Per-backend table of float kernels. Ops that gain nothing from SIMD on
/// this codebase (transcendentals, box sums along x) may point at the shared
/// scalar implementation in either table.
struct FloatOps {
  void (*conv3d_forward)(const float*, const float*, const float*, float*,
                         const Conv3dShape&);
  void (*conv3d_backward_params)(const float*, const float*, float*, float*,
                                 const Conv3dShape&);
  void (*relu_fwd)(const float*, float*, i64);
  void (*relu_bwd)(const float*, const float*, float*, i64);
  void (*lrelu_fwd)(const float*, float*, i64, float);
  void (*lrelu_bwd)(const float*, const float*, float*, i64, float);
  void (*tanh_fwd)(const float*, float*, i64);
  void (*tanh_bwd)(const float*, const float*, float*, i64);
  void (*sigmoid_fwd)(const float*, float*, i64);
  void (*sigmoid_bwd)(const float*, const float*, float*, i64);
  void (*add)(const float*, const float*, float*, i64);
  void (*mul)(const float*, const float*, float*, i64);
  void (*axpy)(i64, float, const float*, float*);
  void (*scal)(i64, float, float*);
  double (*reduce_sum)(const float*, i64);
  double (*reduce_sumsq)(const float*, i64);
  double (*reduce_dot)(const float*, const float*, i64);
  void (*adam_step)(i64, float*, const float*, float*, float*, int, float,
                    float, float, float);
  void (*box_sum_axis)(const float*, float*, Dims3, int, int);
};

const FloatOps& scalar_float_ops();

/// Null when the build or the CPU lacks AVX2+FMA.
const FloatOps* avx2_float_ops();

}  // namespace iseg::kern
