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

// AVX2+FMA variants of the float kernels. This translation unit is the only
// one compiled with -mavx2 -mfma; callers reach it through the runtime
// dispatch table. Accumulation order is fixed per kernel, so a given backend
// is bit-reproducible; scalar vs AVX2 agree to rounding (equivalence-tested).

#include "kernels_dispatch.hpp"
#include "kernels_impl.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

namespace iseg::kern {
namespace {

using ref::kRowSlack;
using ref::pad_input;
using ref::pad_row;

// Even-index elements of p[0..15]: {p[0], p[2], ..., p[14]}.
inline __m256 load_evens(const float* p) {
  const __m256 v0 = _mm256_loadu_ps(p);
  const __m256 v1 = _mm256_loadu_ps(p + 8);
  const __m256 t = _mm256_shuffle_ps(v0, v1, _MM_SHUFFLE(2, 0, 2, 0));
  return _mm256_castpd_ps(
      _mm256_permute4x64_pd(_mm256_castps_pd(t), 0xD8));
}

// Lane sum in a fixed order (low to high pairs).
inline double hsum(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
  return double(_mm_cvtss_f32(s));
}

inline double hsum_pd(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  __m128d s = _mm_add_pd(lo, hi);
  s = _mm_add_sd(s, _mm_unpackhi_pd(s, s));
  return _mm_cvtsd_f64(s);
}

// Accumulates every (ci, dz, dy) tap row into NB in-register vectors
// covering outputs [8*xv, 8*(xv+NB)). Keeping the accumulators in registers
// across the full tap loop is what buys the speedup over the scalar path.
template <int NB>
inline void conv_block(const std::vector<float>& pad, const float* w,
                       const Conv3dShape& s, i64 co, int z, int y, int xv,
                       __m256 bias_v, float* accout) {
  __m256 acc[NB];
  for (int j = 0; j < NB; ++j) acc[j] = bias_v;
  const int st = s.stride;
  for (int ci = 0; ci < s.ci; ++ci) {
    for (int dz = 0; dz < 3; ++dz) {
      for (int dy = 0; dy < 3; ++dy) {
        const float* r = pad_row(pad, ci, st * z + dz, st * y + dy, s.in);
        const float* wp = w + (((co * s.ci + ci) * 3 + dz) * 3 + dy) * 3;
        const __m256 w0 = _mm256_set1_ps(wp[0]);
        const __m256 w1 = _mm256_set1_ps(wp[1]);
        const __m256 w2 = _mm256_set1_ps(wp[2]);
        if (st == 1) {
          for (int j = 0; j < NB; ++j) {
            const float* p = r + 8 * (xv + j);
            acc[j] = _mm256_fmadd_ps(_mm256_loadu_ps(p), w0, acc[j]);
            acc[j] = _mm256_fmadd_ps(_mm256_loadu_ps(p + 1), w1, acc[j]);
            acc[j] = _mm256_fmadd_ps(_mm256_loadu_ps(p + 2), w2, acc[j]);
          }
        } else {
          for (int j = 0; j < NB; ++j) {
            const float* p = r + 16 * (xv + j);
            acc[j] = _mm256_fmadd_ps(load_evens(p), w0, acc[j]);
            acc[j] = _mm256_fmadd_ps(load_evens(p + 1), w1, acc[j]);
            acc[j] = _mm256_fmadd_ps(load_evens(p + 2), w2, acc[j]);
          }
        }
      }
    }
  }
  for (int j = 0; j < NB; ++j)
    _mm256_storeu_ps(accout + 8 * (xv + j), acc[j]);
}

void conv3d_forward_avx2(const float* in, const float* w, const float* bias,
                         float* out, const Conv3dShape& s) {
  s.validate();
  const Dims3 od = s.out();

  if (s.k == 1) {
    const i64 n = s.in.voxels();
    const i64 nv = n & ~i64(7);
    for (int co = 0; co < s.co; ++co) {
      float* dst = out + i64(co) * n;
      const float b = bias ? bias[co] : 0.0f;
      std::fill(dst, dst + n, b);
      for (int ci = 0; ci < s.ci; ++ci) {
        const float wv = w[i64(co) * s.ci + ci];
        const __m256 wb = _mm256_set1_ps(wv);
        const float* src = in + i64(ci) * n;
        i64 i = 0;
        for (; i < nv; i += 8) {
          __m256 a = _mm256_loadu_ps(dst + i);
          a = _mm256_fmadd_ps(_mm256_loadu_ps(src + i), wb, a);
          _mm256_storeu_ps(dst + i, a);
        }
        for (; i < n; ++i) dst[i] += wv * src[i];
      }
    }
    return;
  }

  static thread_local std::vector<float> pad;
  pad_input(in, pad, s.ci, s.in);

  const int nvec = (od.w + 7) / 8;
  static thread_local std::vector<float> accbuf;
  accbuf.resize(i64(nvec) * 8);
  float* acc = accbuf.data();

  for (int co = 0; co < s.co; ++co) {
    const __m256 bias_v = _mm256_set1_ps(bias ? bias[co] : 0.0f);
    for (int z = 0; z < od.d; ++z) {
      for (int y = 0; y < od.h; ++y) {
        int xv = 0;
        for (; xv + 4 <= nvec; xv += 4)
          conv_block<4>(pad, w, s, co, z, y, xv, bias_v, acc);
        for (; xv < nvec; ++xv)
          conv_block<1>(pad, w, s, co, z, y, xv, bias_v, acc);
        std::copy(acc, acc + od.w,
                  out + ((i64(co) * od.d + z) * od.h + y) * od.w);
      }
    }
  }
}

double reduce_sum_avx2(const float* x, i64 n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  const i64 nv = n & ~i64(7);
  for (i64 i = 0; i < nv; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    acc0 = _mm256_add_pd(acc0,
                         _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    acc1 = _mm256_add_pd(acc1,
                         _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
  double total = hsum_pd(acc0) + hsum_pd(acc1);
  for (i64 i = nv; i < n; ++i) total += double(x[i]);
  return total;
}

double reduce_sumsq_avx2(const float* x, i64 n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  const i64 nv = n & ~i64(7);
  for (i64 i = 0; i < nv; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    acc0 = _mm256_fmadd_pd(lo, lo, acc0);
    acc1 = _mm256_fmadd_pd(hi, hi, acc1);
  }
  double total = hsum_pd(acc0) + hsum_pd(acc1);
  for (i64 i = nv; i < n; ++i) total += double(x[i]) * double(x[i]);
  return total;
}

double reduce_dot_avx2(const float* x, const float* y, i64 n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  const i64 nv = n & ~i64(7);
  for (i64 i = 0; i < nv; i += 8) {
    const __m256 a = _mm256_loadu_ps(x + i);
    const __m256 b = _mm256_loadu_ps(y + i);
    acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(a)),
                           _mm256_cvtps_pd(_mm256_castps256_ps128(b)), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(a, 1)),
                           _mm256_cvtps_pd(_mm256_extractf128_ps(b, 1)), acc1);
  }
  double total = hsum_pd(acc0) + hsum_pd(acc1);
  for (i64 i = nv; i < n; ++i) total += double(x[i]) * double(y[i]);
  return total;
}

void conv3d_backward_params_avx2(const float* in, const float* gout, float* gw,
                                 float* gbias, const Conv3dShape& s) {
  s.validate();
  const Dims3 od = s.out();

  if (s.k == 1) {
    const i64 n = s.in.voxels();
    for (int co = 0; co < s.co; ++co) {
      const float* g = gout + i64(co) * n;
      if (gbias) gbias[co] = float(reduce_sum_avx2(g, n));
      for (int ci = 0; ci < s.ci; ++ci)
        gw[i64(co) * s.ci + ci] = float(reduce_dot_avx2(g, in + i64(ci) * n, n));
    }
    return;
  }

  static thread_local std::vector<float> pad;
  pad_input(in, pad, s.ci, s.in);
  const int st = s.stride;
  const i64 ovox = od.voxels();
  const int wv_end = od.w & ~7;

  for (int co = 0; co < s.co; ++co) {
    if (gbias) gbias[co] = float(reduce_sum_avx2(gout + i64(co) * ovox, ovox));
    for (int ci = 0; ci < s.ci; ++ci) {
      double tap[27] = {};
      for (int z = 0; z < od.d; ++z) {
        for (int y = 0; y < od.h; ++y) {
          const float* g = gout + ((i64(co) * od.d + z) * od.h + y) * od.w;
          for (int dz = 0; dz < 3; ++dz) {
            for (int dy = 0; dy < 3; ++dy) {
              const float* r =
                  pad_row(pad, ci, st * z + dz, st * y + dy, s.in);
              __m256 a0 = _mm256_setzero_ps();
              __m256 a1 = _mm256_setzero_ps();
              __m256 a2 = _mm256_setzero_ps();
              int x = 0;
              if (st == 1) {
                for (; x < wv_end; x += 8) {
                  const __m256 gv = _mm256_loadu_ps(g + x);
                  a0 = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r + x), a0);
                  a1 = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r + x + 1), a1);
                  a2 = _mm256_fmadd_ps(gv, _mm256_loadu_ps(r + x + 2), a2);
                }
              } else {
                for (; x < wv_end; x += 8) {
                  const __m256 gv = _mm256_loadu_ps(g + x);
                  const float* p = r + 2 * x;
                  a0 = _mm256_fmadd_ps(gv, load_evens(p), a0);
                  a1 = _mm256_fmadd_ps(gv, load_evens(p + 1), a1);
                  a2 = _mm256_fmadd_ps(gv, load_evens(p + 2), a2);
                }
              }
              double s0 = hsum(a0), s1 = hsum(a1), s2 = hsum(a2);
              for (; x < od.w; ++x) {
                const double gvd = double(g[x]);
                const float* p = r + st * x;
                s0 += gvd * double(p[0]);
                s1 += gvd * double(p[1]);
                s2 += gvd * double(p[2]);
              }
              double* t = tap + (dz * 3 + dy) * 3;
              t[0] += s0;
              t[1] += s1;
              t[2] += s2;
            }
          }
        }
      }
      float* dst = gw + (i64(co) * s.ci + ci) * 27;
      for (int i = 0; i < 27; ++i) dst[i] = float(tap[i]);
    }
  }
}

void relu_fwd_avx2(const float* x, float* y, i64 n) {
  const __m256 zero = _mm256_setzero_ps();
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_avx2(const float* x, const float* gy, float* gx, i64 n) {
  const __m256 zero = _mm256_setzero_ps();
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(gx + i, _mm256_and_ps(_mm256_loadu_ps(gy + i), mask));
  }
  for (; i < n; ++i) gx[i] = x[i] > 0.0f ? gy[i] : 0.0f;
}

void lrelu_fwd_avx2(const float* x, float* y, i64 n, float slope) {
  const __m256 sl = _mm256_set1_ps(slope);
  const __m256 zero = _mm256_setzero_ps();
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 neg = _mm256_mul_ps(v, sl);
    const __m256 mask = _mm256_cmp_ps(v, zero, _CMP_GT_OQ);
    _mm256_storeu_ps(y + i, _mm256_blendv_ps(neg, v, mask));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : slope * x[i];
}

void lrelu_bwd_avx2(const float* x, const float* gy, float* gx, i64 n,
                    float slope) {
  const __m256 sl = _mm256_set1_ps(slope);
  const __m256 zero = _mm256_setzero_ps();
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8) {
    const __m256 g = _mm256_loadu_ps(gy + i);
    const __m256 neg = _mm256_mul_ps(g, sl);
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(gx + i, _mm256_blendv_ps(neg, g, mask));
  }
  for (; i < n; ++i) gx[i] = x[i] > 0.0f ? gy[i] : slope * gy[i];
}

void add_avx2(const float* a, const float* b, float* out, i64 n) {
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8)
    _mm256_storeu_ps(out + i,
                     _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_avx2(const float* a, const float* b, float* out, i64 n) {
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8)
    _mm256_storeu_ps(out + i,
                     _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_avx2(i64 n, float a, const float* x, float* y) {
  const __m256 av = _mm256_set1_ps(a);
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(_mm256_loadu_ps(x + i), av, _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

void scal_avx2(i64 n, float a, float* x) {
  const __m256 av = _mm256_set1_ps(a);
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8)
    _mm256_storeu_ps(x + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), av));
  for (; i < n; ++i) x[i] *= a;
}

void adam_step_avx2(i64 n, float* w, const float* g, float* m, float* v,
                    int step, float lr, float beta1, float beta2, float eps) {
  const float bc1 = 1.0f - float(std::pow(double(beta1), step));
  const float bc2 = 1.0f - float(std::pow(double(beta2), step));
  const __m256 b1 = _mm256_set1_ps(beta1);
  const __m256 b2 = _mm256_set1_ps(beta2);
  const __m256 ob1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 ob2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 rbc1 = _mm256_set1_ps(1.0f / bc1);
  const __m256 rbc2 = _mm256_set1_ps(1.0f / bc2);
  const __m256 lrv = _mm256_set1_ps(lr);
  const __m256 epsv = _mm256_set1_ps(eps);
  const i64 nv = n & ~i64(7);
  i64 i = 0;
  for (; i < nv; i += 8) {
    const __m256 gv = _mm256_loadu_ps(g + i);
    __m256 mv = _mm256_loadu_ps(m + i);
    __m256 vv = _mm256_loadu_ps(v + i);
    mv = _mm256_fmadd_ps(ob1, gv, _mm256_mul_ps(b1, mv));
    vv = _mm256_fmadd_ps(ob2, _mm256_mul_ps(gv, gv), _mm256_mul_ps(b2, vv));
    _mm256_storeu_ps(m + i, mv);
    _mm256_storeu_ps(v + i, vv);
    const __m256 mhat = _mm256_mul_ps(mv, rbc1);
    const __m256 vhat = _mm256_mul_ps(vv, rbc2);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), epsv);
    const __m256 upd = _mm256_div_ps(_mm256_mul_ps(lrv, mhat), denom);
    _mm256_storeu_ps(w + i, _mm256_sub_ps(_mm256_loadu_ps(w + i), upd));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    const float mhat = m[i] * (1.0f / bc1);
    const float vhat = v[i] * (1.0f / bc2);
    w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

void box_sum_axis_avx2(const float* in, float* out, Dims3 dims, int axis,
                       int radius) {
  if (axis == 2) {
    // Sequential along x; the scalar path is already memory-bound here.
    ref::box_sum_axis(in, out, dims, axis, radius);
    return;
  }
  const int n = axis == 0 ? dims.d : dims.h;
  const i64 stride = axis == 0 ? i64(dims.w) * dims.h : i64(dims.w);
  const i64 nmaj = axis == 0 ? dims.h : dims.d;
  const i64 stride_maj = axis == 0 ? i64(dims.w) : i64(dims.w) * dims.h;

  const int wv_end = dims.w & ~7;
  for (i64 a = 0; a < nmaj; ++a) {
    const float* src = in + a * stride_maj;
    float* dst = out + a * stride_maj;
    int x = 0;
    for (; x < wv_end; x += 8) {
      __m256 acc = _mm256_setzero_ps();
      const int hi0 = std::min(radius, n - 1);
      for (int i = 0; i <= hi0; ++i)
        acc = _mm256_add_ps(acc, _mm256_loadu_ps(src + i * stride + x));
      _mm256_storeu_ps(dst + x, acc);
      for (int i = 1; i < n; ++i) {
        const int add_idx = i + radius, sub_idx = i - radius - 1;
        if (add_idx < n)
          acc = _mm256_add_ps(acc, _mm256_loadu_ps(src + add_idx * stride + x));
        if (sub_idx >= 0)
          acc = _mm256_sub_ps(acc, _mm256_loadu_ps(src + sub_idx * stride + x));
        _mm256_storeu_ps(dst + i * stride + x, acc);
      }
    }
    for (; x < dims.w; ++x) {
      double acc = 0.0;
      const int hi0 = std::min(radius, n - 1);
      for (int i = 0; i <= hi0; ++i) acc += double(src[i * stride + x]);
      dst[x] = float(acc);
      for (int i = 1; i < n; ++i) {
        const int add_idx = i + radius, sub_idx = i - radius - 1;
        if (add_idx < n) acc += double(src[add_idx * stride + x]);
        if (sub_idx >= 0) acc -= double(src[sub_idx * stride + x]);
        dst[i * stride + x] = float(acc);
      }
    }
  }
}

}  // namespace

const FloatOps* avx2_float_ops() {
  if (!(__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")))
    return nullptr;
  static const FloatOps ops = {
      &conv3d_forward_avx2,
      &conv3d_backward_params_avx2,
      &relu_fwd_avx2,
      &relu_bwd_avx2,
      &lrelu_fwd_avx2,
      &lrelu_bwd_avx2,
      &ref::tanh_fwd<float>,  // libm transcendentals stay scalar
      &ref::tanh_bwd<float>,
      &ref::sigmoid_fwd<float>,
      &ref::sigmoid_bwd<float>,
      &add_avx2,
      &mul_avx2,
      &axpy_avx2,
      &scal_avx2,
      &reduce_sum_avx2,
      &reduce_sumsq_avx2,
      &reduce_dot_avx2,
      &adam_step_avx2,
      &box_sum_axis_avx2,
  };
  return &ops;
}

}  // namespace iseg::kern

#else  // !(__AVX2__ && __FMA__)

namespace iseg::kern {
const FloatOps* avx2_float_ops() { return nullptr; }
}  // namespace iseg::kern

#endif
