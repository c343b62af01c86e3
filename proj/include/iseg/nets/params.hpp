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

#include <cmath>
#include <deque>
#include <string>
#include <utility>

#include "iseg/core/common.hpp"
#include "iseg/core/rng.hpp"
#include "iseg/core/tensor.hpp"
#include "iseg/kernels/kernels.hpp"

namespace iseg::nets {

/// One trainable tensor with its gradient and Adam state. The optimizer
/// sizes m/v on first use so inference-only models stay lean.
template <typename T>
struct Param {
  Tensor<T> w;
  Tensor<T> g;
  Tensor<T> m;
  Tensor<T> v;
};

/// Ordered, name-addressed parameter collection. Creation order is the
/// serialization order, so it must be deterministic per architecture.
template <typename T>
class ParamSet {
 public:
  Param<T>& add(const std::string& name, Tensor<T> init) {
    require(find(name) == nullptr, "duplicate parameter name: " + name);
    items_.emplace_back(name, Param<T>{});
    Param<T>& p = items_.back().second;
    p.g = Tensor<T>::zeros_like(init);
    p.w = std::move(init);
    return p;
  }

  Param<T>* find(const std::string& name) {
    for (auto& [n, p] : items_)
      if (n == name) return &p;
    return nullptr;
  }

  std::deque<std::pair<std::string, Param<T>>>& items() { return items_; }
  const std::deque<std::pair<std::string, Param<T>>>& items() const {
    return items_;
  }

  i64 total_size() const {
    i64 n = 0;
    for (const auto& [name, p] : items_) n += p.w.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : items_) p.g.fill(T(0));
  }

 private:
  std::deque<std::pair<std::string, Param<T>>> items_;
};

/// Adam over a ParamSet. step_count is 1-based inside the update and is part
/// of checkpoints so training resumes bit-exactly.
struct AdamOpt {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  int step_count = 0;

  void step(ParamSet<float>& params) {
    ++step_count;
    for (auto& [name, p] : params.items()) {
      if (p.m.size() != p.w.size()) {
        p.m = Tensor<float>::zeros_like(p.w);
        p.v = Tensor<float>::zeros_like(p.w);
      }
      kern::adam_step<float>(p.w.size(), p.w.data(), p.g.data(), p.m.data(),
                             p.v.data(), step_count, lr, beta1, beta2, eps);
    }
  }
};

/// Kaiming-normal conv weights: std = sqrt(2 / fan_in), laid out
/// [co][ci][k][k][k] (tensor c=co, d=ci, h=k, w=k*k).
template <typename T>
Tensor<T> conv_init(Rng& rng, int co, int ci, int k) {
  Tensor<T> w(co, Dims3{ci, k, k * k});
  const double std = std::sqrt(2.0 / (double(ci) * k * k * k));
  for (i64 i = 0; i < w.size(); ++i) w.data()[i] = T(rng.normal(0.0, std));
  return w;
}

template <typename T>
Tensor<T> const_init(i64 c, T value) {
  Tensor<T> t(c, Dims3{1, 1, 1});
  t.fill(value);
  return t;
}

}  // namespace iseg::nets
