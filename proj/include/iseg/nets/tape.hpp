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

// Reverse-mode autodiff over Tensor<T>. A Tape owns a growing list of nodes;
// operations append nodes whose backward closures accumulate gradients into
// their parents, so reverse creation order is a valid topological order.
// Parameter leaves borrow their value and gradient storage from the caller
// (gradients accumulate with +=; zero them before backward). One backward
// pass per tape.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "iseg/core/common.hpp"
#include "iseg/core/tensor.hpp"
#include "iseg/kernels/kernels.hpp"

namespace iseg::nets {

template <typename T>
struct Node {
  Tensor<T> val_store;
  Tensor<T> grad_store;
  const Tensor<T>* val_ptr = nullptr;
  Tensor<T>* grad_ptr = nullptr;
  std::function<void()> back;

  const Tensor<T>& val() const { return *val_ptr; }
  Tensor<T>& grad() { return *grad_ptr; }
  bool needs_grad() const { return grad_ptr != nullptr; }
};

template <typename T>
class Tape {
 public:
  /// Leaf owning its value; allocates a zeroed gradient when requested.
  Node<T>* input(Tensor<T> v, bool needs_grad = false) {
    Node<T>* n = alloc();
    n->val_store = std::move(v);
    n->val_ptr = &n->val_store;
    if (needs_grad) {
      n->grad_store = Tensor<T>::zeros_like(n->val_store);
      n->grad_ptr = &n->grad_store;
    }
    return n;
  }

  /// Leaf borrowing parameter storage; backward accumulates into g.
  Node<T>* param(const Tensor<T>& w, Tensor<T>& g) {
    require(w.same_shape(g), "parameter and gradient shapes differ");
    Node<T>* n = alloc();
    n->val_ptr = &w;
    n->grad_ptr = &g;
    return n;
  }

  /// Operation output. The caller fills `back` afterwards.
  Node<T>* make(Tensor<T> v, bool needs_grad) {
    Node<T>* n = alloc();
    n->val_store = std::move(v);
    n->val_ptr = &n->val_store;
    if (needs_grad) {
      n->grad_store = Tensor<T>::zeros_like(n->val_store);
      n->grad_ptr = &n->grad_store;
    }
    return n;
  }

  /// Seed the root gradient (with ones unless given) and run every backward
  /// closure in reverse creation order.
  void backward(Node<T>* root, const Tensor<T>* seed = nullptr) {
    require(root != nullptr && root->needs_grad(),
            "backward root does not require gradients");
    if (seed != nullptr) {
      require(seed->same_shape(root->grad()), "backward seed shape mismatch");
      for (i64 i = 0; i < seed->size(); ++i)
        root->grad().data()[i] += seed->data()[i];
    } else {
      root->grad().fill(T(1));
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if ((*it)->back) (*it)->back();
  }

  size_t size() const { return nodes_.size(); }

 private:
  Node<T>* alloc() {
    nodes_.push_back(std::make_unique<Node<T>>());
    return nodes_.back().get();
  }

  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

namespace detail {

/// y's gradient += src (shape-matched accumulate).
template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  kern::axpy<T>(dst.size(), T(1), src.data(), dst.data());
}

template <typename T>
bool any_parent_needs(std::initializer_list<Node<T>*> ps) {
  for (Node<T>* p : ps)
    if (p != nullptr && p->needs_grad()) return true;
  return false;
}

}  // namespace detail

/// Convolution with "same" zero padding. w laid out [co][ci][k][k][k] as a
/// Tensor with c=co, d=ci, h=k, w=k*k; bias has one value per out channel.
template <typename T>
Node<T>* conv3d(Tape<T>& t, Node<T>* x, Node<T>* w, Node<T>* b, int stride) {
  const int k = int(w->val().h());
  kern::Conv3dShape s;
  s.ci = int(w->val().d());
  s.co = int(w->val().c());
  s.in = x->val().dims();
  s.k = k;
  s.stride = stride;
  s.validate();
  require(x->val().c() == s.ci, "conv input channels mismatch");
  require(w->val().size() == s.weight_count(), "conv weight size mismatch");
  require(b == nullptr || b->val().size() == s.co, "conv bias size mismatch");

  Tensor<T> out(s.co, s.out());
  kern::conv3d_forward<T>(x->val().data(), w->val().data(),
                          b != nullptr ? b->val().data() : nullptr, out.data(),
                          s);
  const bool needs = detail::any_parent_needs<T>({x, w, b});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [x, w, b, y, s]() {
      if (x->needs_grad()) {
        Tensor<T> gin(s.ci, s.in);
        kern::conv3d_backward_input<T>(y->grad().data(), w->val().data(),
                                       gin.data(), s);
        detail::accumulate(x->grad(), gin);
      }
      if (w->needs_grad() || (b != nullptr && b->needs_grad())) {
        Tensor<T> gw(w->val().c(), w->val().dims());
        Tensor<T> gb(b != nullptr ? b->val().c() : 1, Dims3{1, 1, 1});
        kern::conv3d_backward_params<T>(x->val().data(), y->grad().data(),
                                        gw.data(),
                                        b != nullptr ? gb.data() : nullptr, s);
        if (w->needs_grad()) detail::accumulate(w->grad(), gw);
        if (b != nullptr && b->needs_grad())
          detail::accumulate(b->grad(), gb);
      }
    };
  return y;
}

/// Per-channel normalization over the spatial volume with learnable scale
/// and shift (one value per channel each).
template <typename T>
Node<T>* instance_norm(Tape<T>& t, Node<T>* x, Node<T>* gamma, Node<T>* beta,
                       T eps = T(1e-5)) {
  const i64 c = x->val().c();
  const i64 n = x->val().spatial();
  require(gamma->val().size() == c && beta->val().size() == c,
          "norm parameter size mismatch");
  require(n > 0, "norm over empty volume");

  Tensor<T> out(x->val().c(), x->val().dims());
  // Keep the normalized activations for the backward pass.
  auto yhat = std::make_shared<Tensor<T>>(x->val().c(), x->val().dims());
  auto inv_std = std::make_shared<std::vector<T>>(size_t(c));
  for (i64 ci = 0; ci < c; ++ci) {
    const T* src = x->val().chan(ci);
    const double mean = kern::reduce_sum<T>(src, n) / double(n);
    const double sumsq = kern::reduce_sumsq<T>(src, n);
    const double var = std::max(0.0, sumsq / double(n) - mean * mean);
    const T istd = T(1.0 / std::sqrt(var + double(eps)));
    (*inv_std)[size_t(ci)] = istd;
    T* yh = yhat->chan(ci);
    T* dst = out.chan(ci);
    const T g = gamma->val().data()[ci];
    const T bt = beta->val().data()[ci];
    for (i64 i = 0; i < n; ++i) {
      yh[i] = (src[i] - T(mean)) * istd;
      dst[i] = g * yh[i] + bt;
    }
  }
  const bool needs = detail::any_parent_needs<T>({x, gamma, beta});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [x, gamma, beta, y, yhat, inv_std, c, n]() {
      for (i64 ci = 0; ci < c; ++ci) {
        const T* gy = y->grad().chan(ci);
        const T* yh = yhat->chan(ci);
        const double sum_gy = kern::reduce_sum<T>(gy, n);
        const double sum_gyyh = kern::reduce_dot<T>(gy, yh, n);
        if (beta->needs_grad()) beta->grad().data()[ci] += T(sum_gy);
        if (gamma->needs_grad()) gamma->grad().data()[ci] += T(sum_gyyh);
        if (x->needs_grad()) {
          const T g = gamma->val().data()[ci];
          const T istd = (*inv_std)[size_t(ci)];
          const T mg = T(sum_gy / double(n));
          const T mgy = T(sum_gyyh / double(n));
          T* gx = x->grad().chan(ci);
          for (i64 i = 0; i < n; ++i)
            gx[i] += g * istd * (gy[i] - mg - yh[i] * mgy);
        }
      }
    };
  return y;
}

template <typename T>
Node<T>* relu(Tape<T>& t, Node<T>* x) {
  Tensor<T> out(x->val().c(), x->val().dims());
  kern::relu_fwd<T>(x->val().data(), out.data(), out.size());
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y]() {
      Tensor<T> gx = Tensor<T>::zeros_like(x->grad());
      kern::relu_bwd<T>(x->val().data(), y->grad().data(), gx.data(),
                        gx.size());
      detail::accumulate(x->grad(), gx);
    };
  return y;
}

template <typename T>
Node<T>* lrelu(Tape<T>& t, Node<T>* x, T slope = T(0.2)) {
  Tensor<T> out(x->val().c(), x->val().dims());
  kern::lrelu_fwd<T>(x->val().data(), out.data(), out.size(), slope);
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y, slope]() {
      Tensor<T> gx = Tensor<T>::zeros_like(x->grad());
      kern::lrelu_bwd<T>(x->val().data(), y->grad().data(), gx.data(),
                         gx.size(), slope);
      detail::accumulate(x->grad(), gx);
    };
  return y;
}

template <typename T>
Node<T>* tanh_op(Tape<T>& t, Node<T>* x) {
  Tensor<T> out(x->val().c(), x->val().dims());
  kern::tanh_fwd<T>(x->val().data(), out.data(), out.size());
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y]() {
      Tensor<T> gx = Tensor<T>::zeros_like(x->grad());
      kern::tanh_bwd<T>(y->val().data(), y->grad().data(), gx.data(),
                        gx.size());
      detail::accumulate(x->grad(), gx);
    };
  return y;
}

template <typename T>
Node<T>* sigmoid_op(Tape<T>& t, Node<T>* x) {
  Tensor<T> out(x->val().c(), x->val().dims());
  kern::sigmoid_fwd<T>(x->val().data(), out.data(), out.size());
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y]() {
      Tensor<T> gx = Tensor<T>::zeros_like(x->grad());
      kern::sigmoid_bwd<T>(y->val().data(), y->grad().data(), gx.data(),
                          gx.size());
      detail::accumulate(x->grad(), gx);
    };
  return y;
}

/// Nearest-neighbour doubling of every spatial axis.
template <typename T>
Node<T>* upsample2x(Tape<T>& t, Node<T>* x) {
  const Dims3 in = x->val().dims();
  const Dims3 od{in.d * 2, in.h * 2, in.w * 2};
  Tensor<T> out(x->val().c(), od);
  for (i64 ci = 0; ci < x->val().c(); ++ci)
    for (int z = 0; z < od.d; ++z)
      for (int y = 0; y < od.h; ++y) {
        const T* src =
            x->val().chan(ci) + (i64(z / 2) * in.h + y / 2) * in.w;
        T* dst = out.chan(ci) + (i64(z) * od.h + y) * od.w;
        for (int xx = 0; xx < od.w; ++xx) dst[xx] = src[xx / 2];
      }
  Node<T>* yn = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    yn->back = [x, yn, in, od]() {
      for (i64 ci = 0; ci < x->val().c(); ++ci)
        for (int z = 0; z < od.d; ++z)
          for (int y = 0; y < od.h; ++y) {
            const T* gsrc = yn->grad().chan(ci) + (i64(z) * od.h + y) * od.w;
            T* gdst =
                x->grad().chan(ci) + (i64(z / 2) * in.h + y / 2) * in.w;
            for (int xx = 0; xx < od.w; ++xx) gdst[xx / 2] += gsrc[xx];
          }
    };
  return yn;
}

/// Channel concatenation; both inputs share the spatial grid.
template <typename T>
Node<T>* concat(Tape<T>& t, Node<T>* a, Node<T>* b) {
  require(a->val().dims() == b->val().dims(), "concat grids differ");
  const i64 ca = a->val().c(), cb = b->val().c();
  Tensor<T> out(ca + cb, a->val().dims());
  const i64 n = a->val().spatial();
  for (i64 ci = 0; ci < ca; ++ci)
    std::copy_n(a->val().chan(ci), n, out.chan(ci));
  for (i64 ci = 0; ci < cb; ++ci)
    std::copy_n(b->val().chan(ci), n, out.chan(ca + ci));
  const bool needs = detail::any_parent_needs<T>({a, b});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [a, b, y, ca, cb, n]() {
      if (a->needs_grad())
        for (i64 ci = 0; ci < ca; ++ci)
          kern::axpy<T>(n, T(1), y->grad().chan(ci), a->grad().chan(ci));
      if (b->needs_grad())
        for (i64 ci = 0; ci < cb; ++ci)
          kern::axpy<T>(n, T(1), y->grad().chan(ca + ci), b->grad().chan(ci));
    };
  return y;
}

template <typename T>
Node<T>* add_nodes(Tape<T>& t, Node<T>* a, Node<T>* b) {
  require(a->val().same_shape(b->val()), "add shapes differ");
  Tensor<T> out(a->val().c(), a->val().dims());
  kern::add<T>(a->val().data(), b->val().data(), out.data(), out.size());
  const bool needs = detail::any_parent_needs<T>({a, b});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [a, b, y]() {
      if (a->needs_grad()) detail::accumulate(a->grad(), y->grad());
      if (b->needs_grad()) detail::accumulate(b->grad(), y->grad());
    };
  return y;
}

template <typename T>
Node<T>* sub_nodes(Tape<T>& t, Node<T>* a, Node<T>* b) {
  require(a->val().same_shape(b->val()), "sub shapes differ");
  Tensor<T> out(a->val().c(), a->val().dims());
  for (i64 i = 0; i < out.size(); ++i)
    out.data()[i] = a->val().data()[i] - b->val().data()[i];
  const bool needs = detail::any_parent_needs<T>({a, b});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [a, b, y]() {
      if (a->needs_grad()) detail::accumulate(a->grad(), y->grad());
      if (b->needs_grad())
        kern::axpy<T>(b->grad().size(), T(-1), y->grad().data(),
                      b->grad().data());
    };
  return y;
}

template <typename T>
Node<T>* mul_nodes(Tape<T>& t, Node<T>* a, Node<T>* b) {
  require(a->val().same_shape(b->val()), "mul shapes differ");
  Tensor<T> out(a->val().c(), a->val().dims());
  kern::mul<T>(a->val().data(), b->val().data(), out.data(), out.size());
  const bool needs = detail::any_parent_needs<T>({a, b});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [a, b, y]() {
      const i64 n = y->grad().size();
      if (a->needs_grad())
        for (i64 i = 0; i < n; ++i)
          a->grad().data()[i] += y->grad().data()[i] * b->val().data()[i];
      if (b->needs_grad())
        for (i64 i = 0; i < n; ++i)
          b->grad().data()[i] += y->grad().data()[i] * a->val().data()[i];
    };
  return y;
}

template <typename T>
Node<T>* scale(Tape<T>& t, Node<T>* x, T factor) {
  Tensor<T> out(x->val().c(), x->val().dims());
  for (i64 i = 0; i < out.size(); ++i)
    out.data()[i] = x->val().data()[i] * factor;
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y, factor]() {
      kern::axpy<T>(x->grad().size(), factor, y->grad().data(),
                    x->grad().data());
    };
  return y;
}

/// x broadcast-multiplied by a single-channel map a.
template <typename T>
Node<T>* mul_broadcast(Tape<T>& t, Node<T>* x, Node<T>* a) {
  require(a->val().c() == 1, "broadcast factor must have one channel");
  require(a->val().dims() == x->val().dims(), "broadcast grids differ");
  const i64 c = x->val().c(), n = x->val().spatial();
  Tensor<T> out(c, x->val().dims());
  for (i64 ci = 0; ci < c; ++ci)
    kern::mul<T>(x->val().chan(ci), a->val().data(), out.chan(ci), n);
  const bool needs = detail::any_parent_needs<T>({x, a});
  Node<T>* y = t.make(std::move(out), needs);
  if (needs)
    y->back = [x, a, y, c, n]() {
      for (i64 ci = 0; ci < c; ++ci) {
        const T* gy = y->grad().chan(ci);
        if (x->needs_grad()) {
          T* gx = x->grad().chan(ci);
          const T* av = a->val().data();
          for (i64 i = 0; i < n; ++i) gx[i] += gy[i] * av[i];
        }
        if (a->needs_grad()) {
          T* ga = a->grad().data();
          const T* xv = x->val().chan(ci);
          for (i64 i = 0; i < n; ++i) ga[i] += gy[i] * xv[i];
        }
      }
    };
  return y;
}

/// Channelwise softmax (stable, max-shifted) so per-voxel class
/// probabilities sum to one.
template <typename T>
Node<T>* softmax_channels(Tape<T>& t, Node<T>* x) {
  const i64 c = x->val().c(), n = x->val().spatial();
  require(c >= 1, "softmax needs at least one channel");
  Tensor<T> out(c, x->val().dims());
  for (i64 i = 0; i < n; ++i) {
    T mx = x->val().chan(0)[i];
    for (i64 ci = 1; ci < c; ++ci) mx = std::max(mx, x->val().chan(ci)[i]);
    T denom = T(0);
    for (i64 ci = 0; ci < c; ++ci) {
      const T e = std::exp(x->val().chan(ci)[i] - mx);
      out.chan(ci)[i] = e;
      denom += e;
    }
    for (i64 ci = 0; ci < c; ++ci) out.chan(ci)[i] /= denom;
  }
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y, c, n]() {
      for (i64 i = 0; i < n; ++i) {
        T dot = T(0);
        for (i64 ci = 0; ci < c; ++ci)
          dot += y->grad().chan(ci)[i] * y->val().chan(ci)[i];
        for (i64 ci = 0; ci < c; ++ci)
          x->grad().chan(ci)[i] +=
              y->val().chan(ci)[i] * (y->grad().chan(ci)[i] - dot);
      }
    };
  return y;
}

/// Mean over every element, produced as a single-element node.
template <typename T>
Node<T>* mean_all(Tape<T>& t, Node<T>* x) {
  const i64 n = x->val().size();
  Tensor<T> out(1, Dims3{1, 1, 1});
  out.data()[0] = T(kern::reduce_sum<T>(x->val().data(), n) / double(n));
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y, n]() {
      const T g = y->grad().data()[0] / T(n);
      for (i64 i = 0; i < n; ++i) x->grad().data()[i] += g;
    };
  return y;
}

template <typename T>
Node<T>* sum_all(Tape<T>& t, Node<T>* x) {
  const i64 n = x->val().size();
  Tensor<T> out(1, Dims3{1, 1, 1});
  out.data()[0] = T(kern::reduce_sum<T>(x->val().data(), n));
  Node<T>* y = t.make(std::move(out), x->needs_grad());
  if (x->needs_grad())
    y->back = [x, y, n]() {
      const T g = y->grad().data()[0];
      for (i64 i = 0; i < n; ++i) x->grad().data()[i] += g;
    };
  return y;
}

}  // namespace iseg::nets
