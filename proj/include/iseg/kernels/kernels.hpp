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

#include "iseg/core/common.hpp"
#include "iseg/core/tensor.hpp"

// Arithmetic inner loops behind every network pass and loss. Each op has a
// scalar reference implementation plus an AVX2 variant; the float entry
// points dispatch at runtime through a backend table (auto-detected, or
// forced via set_backend / ISEG_KERNEL_BACKEND). The double instantiations
// always run the scalar reference and exist for finite-difference gradient
// checks. Every kernel is single-threaded and accumulates in a fixed order,
// so results are bit-reproducible for a given backend.
namespace iseg::kern {

enum class Backend { scalar, avx2 };

const char* backend_name(Backend b);
bool backend_supported(Backend b);
Backend active_backend();
/// Throws if the backend is not supported on this CPU.
void set_backend(Backend b);
/// Auto-detect (honours ISEG_KERNEL_BACKEND=scalar|avx2 if set).
void reset_backend();

/// Shape of a 3D convolution: in [ci][in.d][in.h][in.w],
/// weights [co][ci][k][k][k], out [co][od][oh][ow] with "same" zero padding
/// of (k-1)/2 and od = ceil(in.d / stride). k must be 1 or 3; stride 1 or 2
/// (k=1 requires stride 1).
struct Conv3dShape {
  int ci = 0, co = 0;
  Dims3 in{};
  int k = 3;
  int stride = 1;

  Dims3 out() const {
    return Dims3{(in.d + stride - 1) / stride, (in.h + stride - 1) / stride,
                 (in.w + stride - 1) / stride};
  }
  i64 weight_count() const { return i64(co) * ci * k * k * k; }
  void validate() const;
};

template <class T>
void conv3d_forward(const T* in, const T* w, const T* bias, T* out,
                    const Conv3dShape& s);

/// gin from gout;  gin = conv_stride1(zero_stuffed(gout), flipped(w)).
template <class T>
void conv3d_backward_input(const T* gout, const T* w, T* gin,
                           const Conv3dShape& s);

/// gw/gbias are overwritten (not accumulated). gbias may be null.
template <class T>
void conv3d_backward_params(const T* in, const T* gout, T* gw, T* gbias,
                            const Conv3dShape& s);

// Elementwise ops. Backward conventions: relu/lrelu take the forward input,
// tanh/sigmoid take the forward output.
template <class T> void relu_fwd(const T* x, T* y, i64 n);
template <class T> void relu_bwd(const T* x, const T* gy, T* gx, i64 n);
template <class T> void lrelu_fwd(const T* x, T* y, i64 n, T slope);
template <class T> void lrelu_bwd(const T* x, const T* gy, T* gx, i64 n, T slope);
template <class T> void tanh_fwd(const T* x, T* y, i64 n);
template <class T> void tanh_bwd(const T* y, const T* gy, T* gx, i64 n);
template <class T> void sigmoid_fwd(const T* x, T* y, i64 n);
template <class T> void sigmoid_bwd(const T* y, const T* gy, T* gx, i64 n);

template <class T> void add(const T* a, const T* b, T* out, i64 n);
template <class T> void mul(const T* a, const T* b, T* out, i64 n);
/// y += a * x
template <class T> void axpy(i64 n, T a, const T* x, T* y);
template <class T> void scal(i64 n, T a, T* x);

// Reductions return double regardless of T; accumulation order is fixed.
template <class T> double reduce_sum(const T* x, i64 n);
template <class T> double reduce_sumsq(const T* x, i64 n);
template <class T> double reduce_dot(const T* x, const T* y, i64 n);

/// One Adam update over a parameter block. step is 1-based and drives the
/// bias correction.
template <class T>
void adam_step(i64 n, T* w, const T* g, T* m, T* v, int step, T lr, T beta1,
               T beta2, T eps);

/// Moving-window sum along one axis (0=z, 1=y, 2=x), window clamped at the
/// grid border. Used by the LNCC loss for window statistics.
template <class T>
void box_sum_axis(const T* in, T* out, Dims3 dims, int axis, int radius);

}  // namespace iseg::kern
