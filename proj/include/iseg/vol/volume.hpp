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

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "iseg/core/common.hpp"
#include "iseg/core/tensor.hpp"

// Geometry-aware volume and label-map types. Voxel axis order is (x, y, z)
// with x fastest in memory; the affine maps voxel indices (i, j, k, 1) to
// world millimetres and carries all orientation information. No implicit
// reorientation happens on load.
namespace iseg::vol {

/// Row-major 4x4 voxel-to-world transform.
struct Mat4 {
  std::array<double, 16> m{};

  static Mat4 identity();
  static Mat4 scaling(double sx, double sy, double sz);

  double& at(int r, int c) { return m[size_t(r * 4 + c)]; }
  double at(int r, int c) const { return m[size_t(r * 4 + c)]; }

  Mat4 operator*(const Mat4& o) const;
  bool operator==(const Mat4&) const = default;

  /// Affine point transform of voxel coordinates (x, y, z).
  std::array<double, 3> apply(double x, double y, double z) const;

  /// Gauss-Jordan inverse. Throws iseg::Error when singular.
  Mat4 inverse() const;
  bool invertible() const;
};

enum class Modality { t1w, t2w, synthetic };

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);

/// Tissue codes, in report row order.
enum class Tissue : std::uint8_t {
  background = 0,
  csf = 1,
  gm = 2,
  wm = 3,
  ventricle = 4,
  cerebellum = 5,
  basal_ganglia = 6,
  brainstem = 7,
  hippocampus_amygdala = 8,
};

inline constexpr int kNumLabels = 9;

/// Display name for a tissue code ("CSF", "GM", ...). Throws on codes > 8.
const char* tissue_name(int code);
/// Inverse of tissue_name. Throws on unknown names.
int tissue_from_name(const std::string& name);

struct Volume {
  TensorF data;  // single channel
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Mat4 affine = Mat4::identity();
  Modality modality = Modality::synthetic;

  Volume() = default;
  Volume(Dims3 dims, std::array<double, 3> sp);

  int nx() const { return data.w(); }
  int ny() const { return data.h(); }
  int nz() const { return data.d(); }
  float& at(int x, int y, int z) { return data.at(0, z, y, x); }
  float at(int x, int y, int z) const { return data.at(0, z, y, x); }
};

struct LabelMap {
  Tensor<std::uint8_t> data;  // single channel, codes 0..8
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Mat4 affine = Mat4::identity();

  LabelMap() = default;
  LabelMap(Dims3 dims, std::array<double, 3> sp);

  int nx() const { return data.w(); }
  int ny() const { return data.h(); }
  int nz() const { return data.d(); }
  std::uint8_t& at(int x, int y, int z) { return data.at(0, z, y, x); }
  std::uint8_t at(int x, int y, int z) const { return data.at(0, z, y, x); }
};

/// Dense displacement field. Channel 0/1/2 hold the x/y/z displacement in
/// voxel units of the grid the field lives on.
struct Field {
  TensorF data;  // three channels
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Mat4 affine = Mat4::identity();

  Field() = default;
  Field(Dims3 dims, std::array<double, 3> sp);
};

enum class Interp { trilinear, nearest };

/// Resample onto an isotropic-or-not target spacing. The output grid covers
/// the same world extent to within one voxel and the affine is updated so
/// world coordinates are preserved.
Volume resample(const Volume& v, std::array<double, 3> target_spacing,
                Interp interp);
LabelMap resample_labels(const LabelMap& lm,
                         std::array<double, 3> target_spacing);

/// Z-score the intensities inside the mask (population statistics) and zero
/// everything outside. Throws on an empty mask or zero in-mask variance.
Volume normalize_intensity(const Volume& v, const LabelMap& mask);

/// [9][z][y][x] indicator stack. Throws on labels >= num_classes.
TensorF one_hot(const LabelMap& lm, int num_classes = kNumLabels);

/// Channelwise argmax; ties resolve to the lowest code.
LabelMap argmax_labels(const TensorF& probs, const LabelMap& geometry_like);

/// Voxel coordinates (x, y, z) of every foreground voxel with a background
/// or out-of-grid 6-neighbor, in raster order.
std::vector<std::array<int, 3>> extract_boundary(
    const Tensor<std::uint8_t>& mask);

/// Flip/permute axes so the affine's rotation part has positive diagonal
/// dominance (approximate RAS). World coordinates of the content are
/// preserved. Off by default in the loaders.
Volume reorient_to_ras(const Volume& v);

}  // namespace iseg::vol
