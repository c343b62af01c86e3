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

// Scalar reference kernels. Plain loops over a zero-padded copy of the
// input; the AVX2 variants mirror the same structure with intrinsics. These
// are the ground truth the SIMD variants are equivalence-tested against, and
// the only implementation used for double.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "iseg/kernels/kernels.hpp"

namespace iseg::kern::ref {

// Row slack past the padded width so vector loads may overread safely.
inline constexpr int kRowSlack = 16;

/// Copy [ci][d][h][w] into a buffer padded by 1 voxel of zeros on each
/// spatial side, rows padded to pw = w + 2 + kRowSlack.
template <class T>
void pad_input(const T* in, std::vector<T>& pad, int ci, Dims3 dims) {
  const int pd = dims.d + 2, ph = dims.h + 2, pw = dims.w + 2 + kRowSlack;
  pad.assign(i64(ci) * pd * ph * pw, T(0));
  for (int c = 0; c < ci; ++c) {
    for (int z = 0; z < dims.d; ++z) {
      for (int y = 0; y < dims.h; ++y) {
        const T* src = in + ((i64(c) * dims.d + z) * dims.h + y) * dims.w;
        T* dst = pad.data() + ((i64(c) * pd + (z + 1)) * ph + (y + 1)) * pw + 1;
        std::copy(src, src + dims.w, dst);
      }
    }
  }
}

template <class T>
inline const T* pad_row(const std::vector<T>& pad, int c, int pz, int py,
                        Dims3 dims) {
  const int pd = dims.d + 2, ph = dims.h + 2, pw = dims.w + 2 + kRowSlack;
  (void)pd;
  return pad.data() + ((i64(c) * (dims.d + 2) + pz) * ph + py) * pw;
}

template <class T>
void conv3d_forward(const T* in, const T* w, const T* bias, T* out,
                    const Conv3dShape& s) {
  s.validate();
  const Dims3 od = s.out();
  const i64 ovox = od.voxels();

  if (s.k == 1) {
    const i64 n = s.in.voxels();
    for (int co = 0; co < s.co; ++co) {
      T* dst = out + i64(co) * n;
      const T b = bias ? bias[co] : T(0);
      std::fill(dst, dst + n, b);
      for (int ci = 0; ci < s.ci; ++ci) {
        const T wv = w[i64(co) * s.ci + ci];
        const T* src = in + i64(ci) * n;
        for (i64 i = 0; i < n; ++i) dst[i] += wv * src[i];
      }
    }
    return;
  }

  static thread_local std::vector<T> pad;
  pad_input(in, pad, s.ci, s.in);
  std::vector<T> acc(od.w);

  const int st = s.stride;
  for (int co = 0; co < s.co; ++co) {
    for (int z = 0; z < od.d; ++z) {
      for (int y = 0; y < od.h; ++y) {
        std::fill(acc.begin(), acc.end(), bias ? bias[co] : T(0));
        for (int ci = 0; ci < s.ci; ++ci) {
          for (int dz = 0; dz < 3; ++dz) {
            for (int dy = 0; dy < 3; ++dy) {
              const T* r = pad_row(pad, ci, st * z + dz, st * y + dy, s.in);
              const T* wp = w + (((i64(co) * s.ci + ci) * 3 + dz) * 3 + dy) * 3;
              const T w0 = wp[0], w1 = wp[1], w2 = wp[2];
              if (st == 1) {
                for (int x = 0; x < od.w; ++x)
                  acc[x] += w0 * r[x] + w1 * r[x + 1] + w2 * r[x + 2];
              } else {
                for (int x = 0; x < od.w; ++x) {
                  const T* p = r + 2 * x;
                  acc[x] += w0 * p[0] + w1 * p[1] + w2 * p[2];
                }
              }
            }
          }
        }
        std::copy(acc.begin(), acc.end(),
                  out + ((i64(co) * od.d + z) * od.h + y) * od.w);
      }
    }
  }
}

template <class T>
void conv3d_backward_params(const T* in, const T* gout, T* gw, T* gbias,
                            const Conv3dShape& s) {
  s.validate();
  const Dims3 od = s.out();

  if (s.k == 1) {
    const i64 n = s.in.voxels();
    for (int co = 0; co < s.co; ++co) {
      const T* g = gout + i64(co) * n;
      if (gbias) {
        double acc = 0.0;
        for (i64 i = 0; i < n; ++i) acc += double(g[i]);
        gbias[co] = T(acc);
      }
      for (int ci = 0; ci < s.ci; ++ci) {
        const T* src = in + i64(ci) * n;
        double acc = 0.0;
        for (i64 i = 0; i < n; ++i) acc += double(g[i]) * double(src[i]);
        gw[i64(co) * s.ci + ci] = T(acc);
      }
    }
    return;
  }

  static thread_local std::vector<T> pad;
  pad_input(in, pad, s.ci, s.in);
  const int st = s.stride;

  for (int co = 0; co < s.co; ++co) {
    if (gbias) {
      double acc = 0.0;
      const T* g = gout + i64(co) * od.voxels();
      for (i64 i = 0; i < od.voxels(); ++i) acc += double(g[i]);
      gbias[co] = T(acc);
    }
    for (int ci = 0; ci < s.ci; ++ci) {
      double tap[27] = {};
      for (int z = 0; z < od.d; ++z) {
        for (int y = 0; y < od.h; ++y) {
          const T* g = gout + ((i64(co) * od.d + z) * od.h + y) * od.w;
          for (int dz = 0; dz < 3; ++dz) {
            for (int dy = 0; dy < 3; ++dy) {
              const T* r = pad_row(pad, ci, st * z + dz, st * y + dy, s.in);
              double a0 = 0, a1 = 0, a2 = 0;
              if (st == 1) {
                for (int x = 0; x < od.w; ++x) {
                  const double gv = double(g[x]);
                  a0 += gv * double(r[x]);
                  a1 += gv * double(r[x + 1]);
                  a2 += gv * double(r[x + 2]);
                }
              } else {
                for (int x = 0; x < od.w; ++x) {
                  const double gv = double(g[x]);
                  const T* p = r + 2 * x;
                  a0 += gv * double(p[0]);
                  a1 += gv * double(p[1]);
                  a2 += gv * double(p[2]);
                }
              }
              double* t = tap + (dz * 3 + dy) * 3;
              t[0] += a0;
              t[1] += a1;
              t[2] += a2;
            }
          }
        }
      }
      T* dst = gw + (i64(co) * s.ci + ci) * 27;
      for (int i = 0; i < 27; ++i) dst[i] = T(tap[i]);
    }
  }
}

template <class T>
void relu_fwd(const T* x, T* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd(const T* x, const T* gy, T* gx, i64 n) {
  for (i64 i = 0; i < n; ++i) gx[i] = x[i] > T(0) ? gy[i] : T(0);
}

template <class T>
void lrelu_fwd(const T* x, T* y, i64 n, T slope) {
  for (i64 i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
}

template <class T>
void lrelu_bwd(const T* x, const T* gy, T* gx, i64 n, T slope) {
  for (i64 i = 0; i < n; ++i) gx[i] = x[i] > T(0) ? gy[i] : slope * gy[i];
}

template <class T>
void tanh_fwd(const T* x, T* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

template <class T>
void tanh_bwd(const T* y, const T* gy, T* gx, i64 n) {
  for (i64 i = 0; i < n; ++i) gx[i] = gy[i] * (T(1) - y[i] * y[i]);
}

template <class T>
void sigmoid_fwd(const T* x, T* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <class T>
void sigmoid_bwd(const T* y, const T* gy, T* gx, i64 n) {
  for (i64 i = 0; i < n; ++i) gx[i] = gy[i] * y[i] * (T(1) - y[i]);
}

template <class T>
void add(const T* a, const T* b, T* out, i64 n) {
  for (i64 i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void mul(const T* a, const T* b, T* out, i64 n) {
  for (i64 i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void axpy(i64 n, T a, const T* x, T* y) {
  for (i64 i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
void scal(i64 n, T a, T* x) {
  for (i64 i = 0; i < n; ++i) x[i] *= a;
}

template <class T>
double reduce_sum(const T* x, i64 n) {
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) acc += double(x[i]);
  return acc;
}

template <class T>
double reduce_sumsq(const T* x, i64 n) {
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) acc += double(x[i]) * double(x[i]);
  return acc;
}

template <class T>
double reduce_dot(const T* x, const T* y, i64 n) {
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) acc += double(x[i]) * double(y[i]);
  return acc;
}

template <class T>
void adam_step(i64 n, T* w, const T* g, T* m, T* v, int step, T lr, T beta1,
               T beta2, T eps) {
  const T bc1 = T(1) - T(std::pow(double(beta1), step));
  const T bc2 = T(1) - T(std::pow(double(beta2), step));
  for (i64 i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <class T>
void box_sum_axis(const T* in, T* out, Dims3 dims, int axis, int radius) {
  require(axis >= 0 && axis <= 2, "box_sum_axis: bad axis");
  require(radius >= 0, "box_sum_axis: negative radius");
  const int n = axis == 0 ? dims.d : (axis == 1 ? dims.h : dims.w);
  // Line stride along the axis; lines are enumerated over the other two dims.
  const i64 sx = 1, sy = dims.w, sz = i64(dims.w) * dims.h;
  i64 step, na, nb, stride_a, stride_b;
  if (axis == 2) {
    step = sx; na = dims.d; stride_a = sz; nb = dims.h; stride_b = sy;
  } else if (axis == 1) {
    step = sy; na = dims.d; stride_a = sz; nb = dims.w; stride_b = sx;
  } else {
    step = sz; na = dims.h; stride_a = sy; nb = dims.w; stride_b = sx;
  }
  for (i64 a = 0; a < na; ++a) {
    for (i64 b = 0; b < nb; ++b) {
      const T* src = in + a * stride_a + b * stride_b;
      T* dst = out + a * stride_a + b * stride_b;
      double acc = 0.0;
      const int hi0 = std::min(radius, n - 1);
      for (int i = 0; i <= hi0; ++i) acc += double(src[i * step]);
      dst[0] = T(acc);
      for (int i = 1; i < n; ++i) {
        const int add_idx = i + radius, sub_idx = i - radius - 1;
        if (add_idx < n) acc += double(src[i64(add_idx) * step]);
        if (sub_idx >= 0) acc -= double(src[i64(sub_idx) * step]);
        dst[i64(i) * step] = T(acc);
      }
    }
  }
}

}  // namespace iseg::kern::ref
