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

#include "iseg/vol/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace iseg::vol {

Mat4 Mat4::identity() {
  Mat4 r;
  for (int i = 0; i < 4; ++i) r.at(i, i) = 1.0;
  return r;
}

Mat4 Mat4::scaling(double sx, double sy, double sz) {
  Mat4 r = identity();
  r.at(0, 0) = sx;
  r.at(1, 1) = sy;
  r.at(2, 2) = sz;
  return r;
}

Mat4 Mat4::operator*(const Mat4& o) const {
  Mat4 r;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += at(i, k) * o.at(k, j);
      r.at(i, j) = acc;
    }
  return r;
}

std::array<double, 3> Mat4::apply(double x, double y, double z) const {
  std::array<double, 3> r;
  for (int i = 0; i < 3; ++i)
    r[size_t(i)] =
        at(i, 0) * x + at(i, 1) * y + at(i, 2) * z + at(i, 3);
  return r;
}

Mat4 Mat4::inverse() const {
  double a[4][8];
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      a[i][j] = at(i, j);
      a[i][j + 4] = i == j ? 1.0 : 0.0;
    }
  }
  for (int col = 0; col < 4; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    if (std::abs(a[pivot][col]) < 1e-12) fail("affine is not invertible");
    if (pivot != col)
      for (int j = 0; j < 8; ++j) std::swap(a[pivot][j], a[col][j]);
    const double inv = 1.0 / a[col][col];
    for (int j = 0; j < 8; ++j) a[col][j] *= inv;
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      for (int j = 0; j < 8; ++j) a[r][j] -= f * a[col][j];
    }
  }
  Mat4 out;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) out.at(i, j) = a[i][j + 4];
  return out;
}

bool Mat4::invertible() const {
  try {
    (void)inverse();
    return true;
  } catch (const Error&) {
    return false;
  }
}

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::t1w: return "T1w";
    case Modality::t2w: return "T2w";
    case Modality::synthetic: return "synthetic";
  }
  fail("unknown modality");
}

Modality modality_from_name(const std::string& name) {
  if (name == "T1w") return Modality::t1w;
  if (name == "T2w") return Modality::t2w;
  if (name == "synthetic") return Modality::synthetic;
  fail("unknown modality name: " + name);
}

namespace {
const char* const kTissueNames[kNumLabels] = {
    "Background",  "CSF",        "GM",
    "WM",          "Ventricle",  "Cerebellum",
    "BasalGanglia", "Brainstem", "HippocampusAmygdala",
};
}  // namespace

const char* tissue_name(int code) {
  require(code >= 0 && code < kNumLabels, "tissue code out of range");
  return kTissueNames[code];
}

int tissue_from_name(const std::string& name) {
  for (int i = 0; i < kNumLabels; ++i)
    if (name == kTissueNames[i]) return i;
  fail("unknown tissue name: " + name);
}

Volume::Volume(Dims3 dims, std::array<double, 3> sp)
    : data(1, dims), spacing(sp) {
  affine = Mat4::scaling(sp[0], sp[1], sp[2]);
}

LabelMap::LabelMap(Dims3 dims, std::array<double, 3> sp)
    : data(1, dims), spacing(sp) {
  affine = Mat4::scaling(sp[0], sp[1], sp[2]);
}

Field::Field(Dims3 dims, std::array<double, 3> sp)
    : data(3, dims), spacing(sp) {
  affine = Mat4::scaling(sp[0], sp[1], sp[2]);
}

namespace {

struct ResamplePlan {
  Dims3 out_dims;
  // Input voxel coordinate of output voxel j along axis a is
  // j * ratio[a] + shift[a].
  std::array<double, 3> ratio, shift;
};

ResamplePlan plan_resample(Dims3 in, const std::array<double, 3>& sp,
                           const std::array<double, 3>& target) {
  for (double t : target) require(t > 0.0, "target spacing must be positive");
  ResamplePlan p{};
  const int in_n[3] = {in.w, in.h, in.d};
  int out_n[3];
  for (int a = 0; a < 3; ++a) {
    const double r = target[size_t(a)] / sp[size_t(a)];
    out_n[a] = std::max(1, int(std::llround(in_n[a] / r)));
    p.ratio[size_t(a)] = r;
    p.shift[size_t(a)] = 0.5 * (r - 1.0);
  }
  p.out_dims = Dims3{out_n[2], out_n[1], out_n[0]};
  return p;
}

Mat4 resampled_affine(const Mat4& affine, const ResamplePlan& p) {
  Mat4 s = Mat4::identity();
  for (int a = 0; a < 3; ++a) {
    s.at(a, a) = p.ratio[size_t(a)];
    s.at(a, 3) = p.shift[size_t(a)];
  }
  return affine * s;
}

inline int clampi(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

float sample_trilinear(const TensorF& t, double x, double y, double z) {
  const int x0 = int(std::floor(x)), y0 = int(std::floor(y)),
            z0 = int(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) *
                           (dz ? fz : 1.0 - fz);
        if (wgt == 0.0) continue;
        const int xi = clampi(x0 + dx, 0, t.w() - 1);
        const int yi = clampi(y0 + dy, 0, t.h() - 1);
        const int zi = clampi(z0 + dz, 0, t.d() - 1);
        acc += wgt * t.at(0, zi, yi, xi);
      }
  return float(acc);
}

}  // namespace

Volume resample(const Volume& v, std::array<double, 3> target_spacing,
                Interp interp) {
  const ResamplePlan p = plan_resample(v.data.dims(), v.spacing, target_spacing);
  if (p.out_dims == v.data.dims() && target_spacing == v.spacing) return v;

  Volume out;
  out.data = TensorF(1, p.out_dims);
  out.spacing = target_spacing;
  out.affine = resampled_affine(v.affine, p);
  out.modality = v.modality;
  for (int z = 0; z < p.out_dims.d; ++z) {
    const double sz = z * p.ratio[2] + p.shift[2];
    for (int y = 0; y < p.out_dims.h; ++y) {
      const double sy = y * p.ratio[1] + p.shift[1];
      for (int x = 0; x < p.out_dims.w; ++x) {
        const double sx = x * p.ratio[0] + p.shift[0];
        if (interp == Interp::trilinear) {
          out.data.at(0, z, y, x) = sample_trilinear(v.data, sx, sy, sz);
        } else {
          const int xi = clampi(int(std::llround(sx)), 0, v.nx() - 1);
          const int yi = clampi(int(std::llround(sy)), 0, v.ny() - 1);
          const int zi = clampi(int(std::llround(sz)), 0, v.nz() - 1);
          out.data.at(0, z, y, x) = v.data.at(0, zi, yi, xi);
        }
      }
    }
  }
  return out;
}

LabelMap resample_labels(const LabelMap& lm,
                         std::array<double, 3> target_spacing) {
  const ResamplePlan p = plan_resample(lm.data.dims(), lm.spacing, target_spacing);
  if (p.out_dims == lm.data.dims() && target_spacing == lm.spacing) return lm;

  LabelMap out;
  out.data = Tensor<std::uint8_t>(1, p.out_dims);
  out.spacing = target_spacing;
  out.affine = resampled_affine(lm.affine, p);
  for (int z = 0; z < p.out_dims.d; ++z)
    for (int y = 0; y < p.out_dims.h; ++y)
      for (int x = 0; x < p.out_dims.w; ++x) {
        const int xi = clampi(int(std::llround(x * p.ratio[0] + p.shift[0])),
                              0, lm.nx() - 1);
        const int yi = clampi(int(std::llround(y * p.ratio[1] + p.shift[1])),
                              0, lm.ny() - 1);
        const int zi = clampi(int(std::llround(z * p.ratio[2] + p.shift[2])),
                              0, lm.nz() - 1);
        out.data.at(0, z, y, x) = lm.data.at(0, zi, yi, xi);
      }
  return out;
}

Volume normalize_intensity(const Volume& v, const LabelMap& mask) {
  require(v.data.dims() == mask.data.dims(),
          "normalize_intensity: volume and mask shapes differ");
  const i64 n = v.data.spatial();
  double sum = 0.0, sumsq = 0.0;
  i64 count = 0;
  for (i64 i = 0; i < n; ++i) {
    if (mask.data.data()[i] == 0) continue;
    const double x = v.data.data()[i];
    sum += x;
    sumsq += x * x;
    ++count;
  }
  require(count > 0, "normalize_intensity: empty mask");
  const double mean = sum / double(count);
  const double var = std::max(0.0, sumsq / double(count) - mean * mean);
  require(var > 1e-12, "normalize_intensity: zero variance inside mask");
  const double inv_sd = 1.0 / std::sqrt(var);

  Volume out = v;
  for (i64 i = 0; i < n; ++i)
    out.data.data()[i] = mask.data.data()[i]
                             ? float((v.data.data()[i] - mean) * inv_sd)
                             : 0.0f;
  return out;
}

TensorF one_hot(const LabelMap& lm, int num_classes) {
  require(num_classes >= 1, "one_hot: num_classes must be positive");
  TensorF out(num_classes, lm.data.dims());
  out.fill(0.0f);
  const i64 n = lm.data.spatial();
  for (i64 i = 0; i < n; ++i) {
    const int code = lm.data.data()[i];
    require(code < num_classes, "one_hot: label code out of range");
    out.data()[i64(code) * n + i] = 1.0f;
  }
  return out;
}

LabelMap argmax_labels(const TensorF& probs, const LabelMap& geometry_like) {
  require(probs.c() >= 1 && probs.c() <= 255, "argmax_labels: bad channel count");
  LabelMap out;
  out.data = Tensor<std::uint8_t>(1, probs.dims());
  out.spacing = geometry_like.spacing;
  out.affine = geometry_like.affine;
  const i64 n = probs.spatial();
  for (i64 i = 0; i < n; ++i) {
    int best = 0;
    float best_v = probs.data()[i];
    for (int c = 1; c < probs.c(); ++c) {
      const float v = probs.data()[i64(c) * n + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.data.data()[i] = std::uint8_t(best);
  }
  return out;
}

std::vector<std::array<int, 3>> extract_boundary(
    const Tensor<std::uint8_t>& mask) {
  std::vector<std::array<int, 3>> out;
  const Dims3 d = mask.dims();
  auto fg = [&](int x, int y, int z) -> bool {
    if (x < 0 || x >= d.w || y < 0 || y >= d.h || z < 0 || z >= d.d)
      return false;
    return mask.at(0, z, y, x) != 0;
  };
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        if (!fg(x, y, z)) continue;
        if (!fg(x - 1, y, z) || !fg(x + 1, y, z) || !fg(x, y - 1, z) ||
            !fg(x, y + 1, z) || !fg(x, y, z - 1) || !fg(x, y, z + 1))
          out.push_back({x, y, z});
      }
  return out;
}

Volume reorient_to_ras(const Volume& v) {
  // For each world axis pick the voxel axis with the largest |direction|
  // component, then flip it if the direction is negative.
  int perm[3];
  int sign[3];
  bool used[3] = {false, false, false};
  for (int world = 0; world < 3; ++world) {
    int best = -1;
    double best_abs = -1.0;
    for (int vox = 0; vox < 3; ++vox) {
      if (used[vox]) continue;
      const double a = std::abs(v.affine.at(world, vox));
      if (a > best_abs) {
        best_abs = a;
        best = vox;
      }
    }
    require(best >= 0 && best_abs > 0.0, "reorient: degenerate affine");
    used[best] = true;
    perm[world] = best;
    sign[world] = v.affine.at(world, best) < 0.0 ? -1 : 1;
  }

  const int in_n[3] = {v.nx(), v.ny(), v.nz()};
  const int out_n[3] = {in_n[perm[0]], in_n[perm[1]], in_n[perm[2]]};

  Volume out;
  out.data = TensorF(1, Dims3{out_n[2], out_n[1], out_n[0]});
  out.modality = v.modality;
  for (int a = 0; a < 3; ++a)
    out.spacing[size_t(a)] = v.spacing[size_t(perm[a])];

  // new voxel index n maps to old index: old[perm[a]] = sign>0 ? n[a]
  // : (N-1-n[a]); build the matching index transform T so that
  // out.affine = v.affine * T keeps world coordinates fixed.
  Mat4 t;
  for (int a = 0; a < 3; ++a) {
    t.at(perm[a], a) = sign[a];
    if (sign[a] < 0) t.at(perm[a], 3) = out_n[a] - 1;
  }
  t.at(3, 3) = 1.0;
  out.affine = v.affine * t;

  for (int z = 0; z < out_n[2]; ++z)
    for (int y = 0; y < out_n[1]; ++y)
      for (int x = 0; x < out_n[0]; ++x) {
        const int n[3] = {x, y, z};
        int o[3];
        for (int a = 0; a < 3; ++a)
          o[perm[a]] = sign[a] > 0 ? n[a] : out_n[a] - 1 - n[a];
        out.data.at(0, z, y, x) = v.data.at(0, o[2], o[1], o[0]);
      }
  return out;
}

}  // namespace iseg::vol
