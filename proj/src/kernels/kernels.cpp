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

#include "iseg/kernels/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include "kernels_dispatch.hpp"
#include "kernels_impl.hpp"

namespace iseg::kern {

void Conv3dShape::validate() const {
  require(ci >= 1 && co >= 1, "conv3d: channel counts must be >= 1");
  require(in.d >= 1 && in.h >= 1 && in.w >= 1, "conv3d: empty input grid");
  require(k == 1 || k == 3, "conv3d: kernel size must be 1 or 3");
  require(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
  require(k != 1 || stride == 1, "conv3d: k=1 requires stride 1");
}

const FloatOps& scalar_float_ops() {
  static const FloatOps ops = {
      &ref::conv3d_forward<float>,
      &ref::conv3d_backward_params<float>,
      &ref::relu_fwd<float>,
      &ref::relu_bwd<float>,
      &ref::lrelu_fwd<float>,
      &ref::lrelu_bwd<float>,
      &ref::tanh_fwd<float>,
      &ref::tanh_bwd<float>,
      &ref::sigmoid_fwd<float>,
      &ref::sigmoid_bwd<float>,
      &ref::add<float>,
      &ref::mul<float>,
      &ref::axpy<float>,
      &ref::scal<float>,
      &ref::reduce_sum<float>,
      &ref::reduce_sumsq<float>,
      &ref::reduce_dot<float>,
      &ref::adam_step<float>,
      &ref::box_sum_axis<float>,
  };
  return ops;
}

namespace {

Backend detect_backend() {
  if (const char* env = std::getenv("ISEG_KERNEL_BACKEND")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
    if (std::strcmp(env, "avx2") == 0) {
      require(backend_supported(Backend::avx2),
              "ISEG_KERNEL_BACKEND=avx2 but AVX2 is unavailable");
      return Backend::avx2;
    }
    fail(std::string("unknown ISEG_KERNEL_BACKEND: ") + env);
  }
  return backend_supported(Backend::avx2) ? Backend::avx2 : Backend::scalar;
}

Backend& backend_state() {
  static Backend b = detect_backend();
  return b;
}

const FloatOps& table() {
  return backend_state() == Backend::avx2 ? *avx2_float_ops()
                                          : scalar_float_ops();
}

}  // namespace

const char* backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

bool backend_supported(Backend b) {
  if (b == Backend::scalar) return true;
  return avx2_float_ops() != nullptr;
}

Backend active_backend() { return backend_state(); }

void set_backend(Backend b) {
  require(backend_supported(b),
          std::string("kernel backend not supported here: ") + backend_name(b));
  backend_state() = b;
}

void reset_backend() { backend_state() = detect_backend(); }

// ---------------------------------------------------------------------------
// Dispatching entry points. float routes through the active backend table;
// double always runs the scalar reference.

template <>
void conv3d_forward<float>(const float* in, const float* w, const float* bias,
                           float* out, const Conv3dShape& s) {
  table().conv3d_forward(in, w, bias, out, s);
}
template <>
void conv3d_forward<double>(const double* in, const double* w,
                            const double* bias, double* out,
                            const Conv3dShape& s) {
  ref::conv3d_forward(in, w, bias, out, s);
}

template <>
void conv3d_backward_params<float>(const float* in, const float* gout,
                                   float* gw, float* gbias,
                                   const Conv3dShape& s) {
  table().conv3d_backward_params(in, gout, gw, gbias, s);
}
template <>
void conv3d_backward_params<double>(const double* in, const double* gout,
                                    double* gw, double* gbias,
                                    const Conv3dShape& s) {
  ref::conv3d_backward_params(in, gout, gw, gbias, s);
}

template <class T>
void conv3d_backward_input(const T* gout, const T* w, T* gin,
                           const Conv3dShape& s) {
  s.validate();
  const Dims3 od = s.out();

  if (s.k == 1) {
    // Pointwise: gin[ci] = sum_co w[co][ci] * gout[co].
    const i64 n = s.in.voxels();
    for (int ci = 0; ci < s.ci; ++ci) {
      T* dst = gin + i64(ci) * n;
      std::fill(dst, dst + n, T(0));
      for (int co = 0; co < s.co; ++co)
        axpy<T>(n, w[i64(co) * s.ci + ci], gout + i64(co) * n, dst);
    }
    return;
  }

  // gin = conv_stride1(zero_stuffed(gout), flip(w) with ci/co swapped).
  std::vector<T> stuffed(i64(s.co) * s.in.voxels(), T(0));
  for (int co = 0; co < s.co; ++co) {
    for (int z = 0; z < od.d; ++z)
      for (int y = 0; y < od.h; ++y) {
        const T* src = gout + ((i64(co) * od.d + z) * od.h + y) * od.w;
        T* dst = stuffed.data() +
                 ((i64(co) * s.in.d + i64(z) * s.stride) * s.in.h +
                  i64(y) * s.stride) *
                     s.in.w;
        if (s.stride == 1) {
          std::copy(src, src + od.w, dst);
        } else {
          for (int x = 0; x < od.w; ++x) dst[i64(x) * 2] = src[x];
        }
      }
  }

  std::vector<T> wflip(s.weight_count());
  for (int co = 0; co < s.co; ++co)
    for (int ci = 0; ci < s.ci; ++ci)
      for (int t = 0; t < 27; ++t)
        wflip[(i64(ci) * s.co + co) * 27 + (26 - t)] =
            w[(i64(co) * s.ci + ci) * 27 + t];

  Conv3dShape back{s.co, s.ci, s.in, 3, 1};
  conv3d_forward<T>(stuffed.data(), wflip.data(), nullptr, gin, back);
}

template void conv3d_backward_input<float>(const float*, const float*, float*,
                                           const Conv3dShape&);
template void conv3d_backward_input<double>(const double*, const double*,
                                            double*, const Conv3dShape&);

#define ISEG_DISPATCH_UNARY(name)                                        \
  template <>                                                            \
  void name<float>(const float* a, float* b, i64 n) {                    \
    table().name(a, b, n);                                               \
  }                                                                      \
  template <>                                                            \
  void name<double>(const double* a, double* b, i64 n) {                 \
    ref::name(a, b, n);                                                  \
  }

#define ISEG_DISPATCH_BINARY(name)                                       \
  template <>                                                            \
  void name<float>(const float* a, const float* b, float* c, i64 n) {    \
    table().name(a, b, c, n);                                            \
  }                                                                      \
  template <>                                                            \
  void name<double>(const double* a, const double* b, double* c, i64 n) { \
    ref::name(a, b, c, n);                                               \
  }

ISEG_DISPATCH_UNARY(relu_fwd)
ISEG_DISPATCH_UNARY(tanh_fwd)
ISEG_DISPATCH_UNARY(sigmoid_fwd)
ISEG_DISPATCH_BINARY(relu_bwd)
ISEG_DISPATCH_BINARY(tanh_bwd)
ISEG_DISPATCH_BINARY(sigmoid_bwd)
ISEG_DISPATCH_BINARY(add)
ISEG_DISPATCH_BINARY(mul)

template <>
void lrelu_fwd<float>(const float* x, float* y, i64 n, float slope) {
  table().lrelu_fwd(x, y, n, slope);
}
template <>
void lrelu_fwd<double>(const double* x, double* y, i64 n, double slope) {
  ref::lrelu_fwd(x, y, n, slope);
}
template <>
void lrelu_bwd<float>(const float* x, const float* gy, float* gx, i64 n,
                      float slope) {
  table().lrelu_bwd(x, gy, gx, n, slope);
}
template <>
void lrelu_bwd<double>(const double* x, const double* gy, double* gx, i64 n,
                       double slope) {
  ref::lrelu_bwd(x, gy, gx, n, slope);
}

template <>
void axpy<float>(i64 n, float a, const float* x, float* y) {
  table().axpy(n, a, x, y);
}
template <>
void axpy<double>(i64 n, double a, const double* x, double* y) {
  ref::axpy(n, a, x, y);
}

template <>
void scal<float>(i64 n, float a, float* x) {
  table().scal(n, a, x);
}
template <>
void scal<double>(i64 n, double a, double* x) {
  ref::scal(n, a, x);
}

template <>
double reduce_sum<float>(const float* x, i64 n) {
  return table().reduce_sum(x, n);
}
template <>
double reduce_sum<double>(const double* x, i64 n) {
  return ref::reduce_sum(x, n);
}

template <>
double reduce_sumsq<float>(const float* x, i64 n) {
  return table().reduce_sumsq(x, n);
}
template <>
double reduce_sumsq<double>(const double* x, i64 n) {
  return ref::reduce_sumsq(x, n);
}

template <>
double reduce_dot<float>(const float* x, const float* y, i64 n) {
  return table().reduce_dot(x, y, n);
}
template <>
double reduce_dot<double>(const double* x, const double* y, i64 n) {
  return ref::reduce_dot(x, y, n);
}

template <>
void adam_step<float>(i64 n, float* w, const float* g, float* m, float* v,
                      int step, float lr, float beta1, float beta2, float eps) {
  table().adam_step(n, w, g, m, v, step, lr, beta1, beta2, eps);
}
template <>
void adam_step<double>(i64 n, double* w, const double* g, double* m, double* v,
                       int step, double lr, double beta1, double beta2,
                       double eps) {
  ref::adam_step(n, w, g, m, v, step, lr, beta1, beta2, eps);
}

template <>
void box_sum_axis<float>(const float* in, float* out, Dims3 dims, int axis,
                         int radius) {
  table().box_sum_axis(in, out, dims, axis, radius);
}
template <>
void box_sum_axis<double>(const double* in, double* out, Dims3 dims, int axis,
                          int radius) {
  ref::box_sum_axis(in, out, dims, axis, radius);
}

}  // namespace iseg::kern
