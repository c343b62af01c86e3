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

// Displacement-field warping. output(i) = input(i + u(i)) with trilinear
// sampling; sample positions are clamped to the grid (border values extend
// outward). Field channels 0/1/2 hold x/y/z displacements in voxel units.

#pragma once

#include <cmath>

#include "iseg/nets/tape.hpp"
#include "iseg/vol/volume.hpp"

namespace iseg::nets {

namespace detail {

/// Trilinear sample geometry for one voxel: corner offsets into a channel
/// plane, corner weights, and the raw (unclamped) flag per axis for the
/// position derivative.
template <typename T>
struct SampleGeom {
  i64 corner[8];
  T weight[8];
  T fx, fy, fz;
  i64 x0, x1, y0, y1, z0, z1;
  bool clamped_x, clamped_y, clamped_z;
};

template <typename T>
SampleGeom<T> sample_geom(const Dims3& d, double px, double py, double pz) {
  SampleGeom<T> g;
  g.clamped_x = px < 0.0 || px > double(d.w - 1);
  g.clamped_y = py < 0.0 || py > double(d.h - 1);
  g.clamped_z = pz < 0.0 || pz > double(d.d - 1);
  px = std::clamp(px, 0.0, double(d.w - 1));
  py = std::clamp(py, 0.0, double(d.h - 1));
  pz = std::clamp(pz, 0.0, double(d.d - 1));
  g.x0 = i64(std::floor(px));
  g.y0 = i64(std::floor(py));
  g.z0 = i64(std::floor(pz));
  g.x1 = std::min(g.x0 + 1, i64(d.w - 1));
  g.y1 = std::min(g.y0 + 1, i64(d.h - 1));
  g.z1 = std::min(g.z0 + 1, i64(d.d - 1));
  g.fx = T(px - double(g.x0));
  g.fy = T(py - double(g.y0));
  g.fz = T(pz - double(g.z0));
  const i64 zs[2] = {g.z0, g.z1}, ys[2] = {g.y0, g.y1}, xs[2] = {g.x0, g.x1};
  const T wz[2] = {T(1) - g.fz, g.fz};
  const T wy[2] = {T(1) - g.fy, g.fy};
  const T wx[2] = {T(1) - g.fx, g.fx};
  int n = 0;
  for (int cz = 0; cz < 2; ++cz)
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx, ++n) {
        g.corner[n] = (zs[cz] * d.h + ys[cy]) * d.w + xs[cx];
        g.weight[n] = wz[cz] * wy[cy] * wx[cx];
      }
  return g;
}

}  // namespace detail

/// Plain (non-tape) trilinear warp of a multi-channel tensor.
template <typename T>
Tensor<T> warp_trilinear(const Tensor<T>& img, const Tensor<T>& field) {
  require(field.c() == 3, "field must have three channels");
  require(field.dims() == img.dims(), "warp grids differ");
  const Dims3 d = img.dims();
  Tensor<T> out(img.c(), d);
  i64 i = 0;
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x, ++i) {
        const auto g = detail::sample_geom<T>(
            d, double(x) + double(field.chan(0)[i]),
            double(y) + double(field.chan(1)[i]),
            double(z) + double(field.chan(2)[i]));
        for (i64 ci = 0; ci < img.c(); ++ci) {
          const T* src = img.chan(ci);
          T acc = T(0);
          for (int n = 0; n < 8; ++n)
            if (g.weight[n] != T(0)) acc += g.weight[n] * src[g.corner[n]];
          out.chan(ci)[i] = acc;
        }
      }
  return out;
}

/// Label-aware warp: the one-hot stack is moved trilinearly, then each voxel
/// takes the arg-max code (ties resolve to the lowest code).
inline vol::LabelMap warp_labels(const vol::LabelMap& lm,
                                 const vol::Field& field) {
  require(field.data.dims() == lm.data.dims(), "warp grids differ");
  const TensorF hot = vol::one_hot(lm);
  const TensorF moved = warp_trilinear<float>(hot, field.data);
  return vol::argmax_labels(moved, lm);
}

/// Differentiable warp node; gradients flow to both the image and the field
/// (position gradients vanish where the sample was clamped at the border).
template <typename T>
Node<T>* warp(Tape<T>& t, Node<T>* img, Node<T>* field) {
  Tensor<T> out = warp_trilinear<T>(img->val(), field->val());
  const bool needs = detail::any_parent_needs<T>({img, field});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [img, field, y]() {
      const Dims3 d = img->val().dims();
      const i64 c = img->val().c();
      i64 i = 0;
      for (int z = 0; z < d.d; ++z)
        for (int y_ = 0; y_ < d.h; ++y_)
          for (int x = 0; x < d.w; ++x, ++i) {
            const auto g = detail::sample_geom<T>(
                d, double(x) + double(field->val().chan(0)[i]),
                double(y_) + double(field->val().chan(1)[i]),
                double(z) + double(field->val().chan(2)[i]));
            T gpx = T(0), gpy = T(0), gpz = T(0);
            for (i64 ci = 0; ci < c; ++ci) {
              const T gy = y->grad().chan(ci)[i];
              if (gy == T(0)) continue;
              const T* src = img->val().chan(ci);
              if (img->needs_grad()) {
                T* gi = img->grad().chan(ci);
                for (int n = 0; n < 8; ++n)
                  if (g.weight[n] != T(0))
                    gi[g.corner[n]] += gy * g.weight[n];
              }
              if (field->needs_grad()) {
                // Derivative of the trilinear value per position axis.
                const T wz0 = T(1) - g.fz, wz1 = g.fz;
                const T wy0 = T(1) - g.fy, wy1 = g.fy;
                const T wx0 = T(1) - g.fx, wx1 = g.fx;
                auto at = [&](i64 zz, i64 yy, i64 xx) {
                  return src[(zz * d.h + yy) * d.w + xx];
                };
                if (!g.clamped_x) {
                  T dv = T(0);
                  dv += wz0 * wy0 * (at(g.z0, g.y0, g.x1) - at(g.z0, g.y0, g.x0));
                  dv += wz0 * wy1 * (at(g.z0, g.y1, g.x1) - at(g.z0, g.y1, g.x0));
                  dv += wz1 * wy0 * (at(g.z1, g.y0, g.x1) - at(g.z1, g.y0, g.x0));
                  dv += wz1 * wy1 * (at(g.z1, g.y1, g.x1) - at(g.z1, g.y1, g.x0));
                  gpx += gy * dv;
                }
                if (!g.clamped_y) {
                  T dv = T(0);
                  dv += wz0 * wx0 * (at(g.z0, g.y1, g.x0) - at(g.z0, g.y0, g.x0));
                  dv += wz0 * wx1 * (at(g.z0, g.y1, g.x1) - at(g.z0, g.y0, g.x1));
                  dv += wz1 * wx0 * (at(g.z1, g.y1, g.x0) - at(g.z1, g.y0, g.x0));
                  dv += wz1 * wx1 * (at(g.z1, g.y1, g.x1) - at(g.z1, g.y0, g.x1));
                  gpy += gy * dv;
                }
                if (!g.clamped_z) {
                  T dv = T(0);
                  dv += wy0 * wx0 * (at(g.z1, g.y0, g.x0) - at(g.z0, g.y0, g.x0));
                  dv += wy0 * wx1 * (at(g.z1, g.y0, g.x1) - at(g.z0, g.y0, g.x1));
                  dv += wy1 * wx0 * (at(g.z1, g.y1, g.x0) - at(g.z0, g.y1, g.x0));
                  dv += wy1 * wx1 * (at(g.z1, g.y1, g.x1) - at(g.z0, g.y1, g.x1));
                  gpz += gy * dv;
                }
              }
            }
            if (field->needs_grad()) {
              field->grad().chan(0)[i] += gpx;
              field->grad().chan(1)[i] += gpy;
              field->grad().chan(2)[i] += gpz;
            }
          }
    };
  return y;
}

}  // namespace iseg::nets
