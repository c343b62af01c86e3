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
#include <cmath>
#include <vector>

#include "iseg/core/common.hpp"

namespace iseg {

/// Spatial grid size, (d, h, w) = (z, y, x) extents. Storage is x-fastest.
struct Dims3 {
  int d = 0, h = 0, w = 0;

  i64 voxels() const { return i64(d) * h * w; }
  bool operator==(const Dims3&) const = default;
};

/// Dense channels-first volume tensor, laid out [c][z][y][x] with x fastest.
/// Used both for single-channel images (c=1) and feature maps. Batches are
/// handled by looping over per-sample tensors; volumes here are small enough
/// that the simplicity wins.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int c, Dims3 dims) : c_(c), dims_(dims), data_(i64(c) * dims.voxels()) {
    require(c >= 1 && dims.d >= 1 && dims.h >= 1 && dims.w >= 1,
            "Tensor: nonpositive shape");
  }
  Tensor(int c, int d, int h, int w) : Tensor(c, Dims3{d, h, w}) {}

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.c_, o.dims_); }

  int c() const { return c_; }
  const Dims3& dims() const { return dims_; }
  int d() const { return dims_.d; }
  int h() const { return dims_.h; }
  int w() const { return dims_.w; }
  i64 size() const { return i64(data_.size()); }
  i64 spatial() const { return dims_.voxels(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* chan(int ci) { return data_.data() + i64(ci) * spatial(); }
  const T* chan(int ci) const { return data_.data() + i64(ci) * spatial(); }

  T& at(int ci, int z, int y, int x) { return data_[index(ci, z, y, x)]; }
  const T& at(int ci, int z, int y, int x) const { return data_[index(ci, z, y, x)]; }

  i64 index(int ci, int z, int y, int x) const {
    return ((i64(ci) * dims_.d + z) * dims_.h + y) * dims_.w + x;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return c_ == o.c_ && dims_ == o.dims_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, dims_);
    for (i64 i = 0; i < size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  int c_ = 0;
  Dims3 dims_{};
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace iseg
