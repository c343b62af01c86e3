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

// Training objectives, all as tape nodes so gradients come from the same
// machinery the networks use:
//   - segmentation loss: soft DICE plus cross entropy against label codes;
//   - CycleGAN objective: least-squares adversarial terms, L1 cycle and
//     identity terms, and an optional segmentation term on the translated
//     domain-A batch;
//   - registration loss: (1 - windowed LNCC) plus diffusion smoothness of
//     the displacement field. LNCC is a similarity, so the printed form
//     that adds it straight into a loss is implemented as 1 - LNCC to give
//     a quantity that gradient descent should minimize.
//
// Every loss is a pure function of its tensor inputs; concurrent evaluation
// on independent inputs is safe.

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "iseg/nets/models.hpp"
#include "iseg/nets/tape.hpp"
#include "iseg/nets/warp.hpp"
#include "iseg/vol/volume.hpp"
#include "json.hpp"

namespace iseg::losses {

using nets::Node;
using nets::Tape;

/// Weights and knobs shared by the composite objectives. The adversarial
/// mode is fixed to least squares. The LNCC window defaults to the
/// desk-scale 7; clinical-resolution runs use 15.
struct LossWeights {
  double lambda_smooth = 0.6;
  int lncc_window = 7;
  double lambda_cycle = 10.0;
  double lambda_identity = 5.0;
  double lambda_seg = 1.0;
  /// When set, smoothness is the raw sum over voxels instead of the mean.
  /// The mean form is the default so lambda_smooth transfers across grids.
  bool smooth_sum_form = false;

  void validate() const {
    require(lambda_smooth >= 0.0 && lambda_cycle >= 0.0 &&
                lambda_identity >= 0.0 && lambda_seg >= 0.0,
            "loss weights must be nonnegative");
    require(lncc_window >= 3 && lncc_window % 2 == 1,
            "lncc window must be odd and at least 3");
  }

  nlohmann::ordered_json to_json() const {
    return nlohmann::ordered_json{{"lambda_smooth", lambda_smooth},
                                  {"lncc_window", lncc_window},
                                  {"lambda_cycle", lambda_cycle},
                                  {"lambda_identity", lambda_identity},
                                  {"lambda_seg", lambda_seg},
                                  {"smooth_sum_form", smooth_sum_form}};
  }

  static LossWeights from_json(const nlohmann::json& j) {
    LossWeights w;
    w.lambda_smooth = j.value("lambda_smooth", w.lambda_smooth);
    w.lncc_window = j.value("lncc_window", w.lncc_window);
    w.lambda_cycle = j.value("lambda_cycle", w.lambda_cycle);
    w.lambda_identity = j.value("lambda_identity", w.lambda_identity);
    w.lambda_seg = j.value("lambda_seg", w.lambda_seg);
    w.smooth_sum_form = j.value("smooth_sum_form", w.smooth_sum_form);
    w.validate();
    return w;
  }
};

namespace detail {

template <typename T>
Node<T>* scalar_node(Tape<T>& t, T value, bool needs_grad) {
  Tensor<T> out(1, Dims3{1, 1, 1});
  out.data()[0] = value;
  return t.make(std::move(out), needs_grad);
}

/// Separable clamped-window box sum over the spatial grid (one channel).
template <typename T>
void box3(const T* in, T* out, T* tmp, const Dims3& d, int radius) {
  kern::box_sum_axis<T>(in, out, d, 0, radius);
  kern::box_sum_axis<T>(out, tmp, d, 1, radius);
  kern::box_sum_axis<T>(tmp, out, d, 2, radius);
}

/// Per-voxel clamped-window element count for the same geometry as box3.
template <typename T>
void box3_counts(std::vector<T>& cnt, const Dims3& d, int radius) {
  auto extent = [radius](int i, int n) {
    return T(std::min(i + radius, n - 1) - std::max(i - radius, 0) + 1);
  };
  cnt.resize(size_t(d.voxels()));
  i64 idx = 0;
  for (int z = 0; z < d.d; ++z) {
    const T ez = extent(z, d.d);
    for (int y = 0; y < d.h; ++y) {
      const T ey = ez * extent(y, d.h);
      for (int x = 0; x < d.w; ++x, ++idx) cnt[size_t(idx)] = ey * extent(x, d.w);
    }
  }
}

}  // namespace detail

/// Soft-DICE smoothing constant (numerator and denominator).
inline constexpr double kDiceEps = 1e-5;
/// Probability floor inside the cross-entropy log.
inline constexpr double kCeFloor = 1e-12;
/// Windows whose normalized variance product falls below this (squared)
/// contribute correlation 0 in lncc.
inline constexpr double kLnccEps = 1e-5;

struct SegLossParts {
  double dice = 0.0;
  double ce = 0.0;
};

/// Soft-DICE term: 1 minus the mean per-class soft DICE over the classes
/// present in the target or in the prediction arg-max; smoothing kDiceEps
/// keeps empty classes defined. Differentiable in pred.
template <typename T>
Node<T>* dice_loss(Tape<T>& t, Node<T>* pred, const vol::LabelMap& target) {
  const int c = pred->val().c();
  require(c == vol::kNumLabels, "seg loss expects 9 class channels");
  require(pred->val().dims() == target.data.dims(), "seg loss grids differ");
  const i64 n = pred->val().spatial();

  std::vector<char> present(size_t(c), 0);
  std::vector<double> inter(size_t(c), 0.0);   // sum of p_k over target k
  std::vector<double> psum(size_t(c), 0.0);
  std::vector<double> ysum(size_t(c), 0.0);
  for (i64 i = 0; i < n; ++i) {
    const int y = target.data.data()[i];
    require(y < c, "seg loss label code out of range");
    present[size_t(y)] = 1;
    ysum[size_t(y)] += 1.0;
    int best = 0;
    T best_v = pred->val().chan(0)[i];
    for (int k = 0; k < c; ++k) {
      const T p = pred->val().chan(k)[i];
      psum[size_t(k)] += double(p);
      if (p > best_v) {
        best_v = p;
        best = k;
      }
    }
    present[size_t(best)] = 1;
    inter[size_t(y)] += double(pred->val().chan(y)[i]);
  }
  int k_present = 0;
  double dice_sum = 0.0;
  std::vector<double> num(size_t(c), 0.0), den(size_t(c), 0.0);
  for (int k = 0; k < c; ++k) {
    if (!present[size_t(k)]) continue;
    ++k_present;
    num[size_t(k)] = 2.0 * inter[size_t(k)] + kDiceEps;
    den[size_t(k)] = psum[size_t(k)] + ysum[size_t(k)] + kDiceEps;
    dice_sum += num[size_t(k)] / den[size_t(k)];
  }
  const double value = 1.0 - dice_sum / double(k_present);

  Node<T>* out = detail::scalar_node(t, T(value), pred->needs_grad());
  if (pred->needs_grad()) {
    auto pres = std::make_shared<std::vector<char>>(std::move(present));
    auto nums = std::make_shared<std::vector<double>>(std::move(num));
    auto dens = std::make_shared<std::vector<double>>(std::move(den));
    out->back = [pred, out, &target, pres, nums, dens, k_present, c, n]() {
      const double g = double(out->grad().data()[0]);
      const double kinv = 1.0 / double(k_present);
      for (int k = 0; k < c; ++k) {
        if (!(*pres)[size_t(k)]) continue;
        const double nk = (*nums)[size_t(k)], dk = (*dens)[size_t(k)];
        T* gp = pred->grad().chan(k);
        for (i64 i = 0; i < n; ++i) {
          const double y = target.data.data()[i] == k ? 1.0 : 0.0;
          gp[i] += T(-g * kinv * (2.0 * y * dk - nk) / (dk * dk));
        }
      }
    };
  }
  return out;
}

/// Voxel-mean cross entropy of the target class probability.
template <typename T>
Node<T>* ce_loss(Tape<T>& t, Node<T>* pred, const vol::LabelMap& target) {
  const int c = pred->val().c();
  require(c == vol::kNumLabels, "seg loss expects 9 class channels");
  require(pred->val().dims() == target.data.dims(), "seg loss grids differ");
  const i64 n = pred->val().spatial();
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const int y = target.data.data()[i];
    require(y < c, "seg loss label code out of range");
    acc -= std::log(std::max(double(pred->val().chan(y)[i]), kCeFloor));
  }
  Node<T>* out = detail::scalar_node(t, T(acc / double(n)),
                                     pred->needs_grad());
  if (pred->needs_grad())
    out->back = [pred, out, &target, n]() {
      const double g = double(out->grad().data()[0]) / double(n);
      for (i64 i = 0; i < n; ++i) {
        const int y = target.data.data()[i];
        const double p = double(pred->val().chan(y)[i]);
        if (p <= kCeFloor) continue;  // flat below the log floor
        pred->grad().chan(y)[i] += T(-g / p);
      }
    };
  return out;
}

/// Full segmentation loss: soft DICE plus cross entropy. The target is
/// captured by reference and must outlive the tape's backward pass.
template <typename T>
Node<T>* seg_loss(Tape<T>& t, Node<T>* pred, const vol::LabelMap& target,
                  SegLossParts* parts = nullptr) {
  Node<T>* d = dice_loss(t, pred, target);
  Node<T>* e = ce_loss(t, pred, target);
  if (parts != nullptr) {
    parts->dice = double(d->val().data()[0]);
    parts->ce = double(e->val().data()[0]);
  }
  return nets::add_nodes(t, d, e);
}

/// Least-squares adversarial loss: mean squared deviation of the patch
/// scores from the target label (1 for real, 0 for fake).
template <typename T>
Node<T>* lsgan_loss(Tape<T>& t, Node<T>* scores, bool target_is_real) {
  Tensor<T> tgt(scores->val().c(), scores->val().dims());
  tgt.fill(target_is_real ? T(1) : T(0));
  Node<T>* d = nets::sub_nodes(t, scores, t.input(std::move(tgt), false));
  return nets::mean_all(t, nets::mul_nodes(t, d, d));
}

/// Mean absolute error; the cycle and identity terms.
template <typename T>
Node<T>* mae_loss(Tape<T>& t, Node<T>* a, Node<T>* b) {
  require(a->val().same_shape(b->val()), "mae shapes differ");
  const i64 n = a->val().size();
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i)
    acc += std::fabs(double(a->val().data()[i]) - double(b->val().data()[i]));
  const bool needs = nets::detail::any_parent_needs<T>({a, b});
  Node<T>* out = detail::scalar_node(t, T(acc / double(n)), needs);
  if (needs)
    out->back = [a, b, out, n]() {
      const T g = out->grad().data()[0] / T(n);
      for (i64 i = 0; i < n; ++i) {
        const double diff =
            double(a->val().data()[i]) - double(b->val().data()[i]);
        const T s = diff > 0.0 ? g : (diff < 0.0 ? -g : T(0));
        if (a->needs_grad()) a->grad().data()[i] += s;
        if (b->needs_grad()) b->grad().data()[i] -= s;
      }
    };
  return out;
}

/// Windowed local normalized cross correlation, averaged over all voxels.
/// Statistics use the clamped window around each voxel (shrinking at the
/// borders, every voxel valid). Windows whose variance product is below
/// kLnccEps squared contribute 0. Returns a scalar node in [-1, 1].
template <typename T>
Node<T>* lncc(Tape<T>& t, Node<T>* f, Node<T>* m, int window) {
  require(f->val().c() == 1 && m->val().c() == 1,
          "lncc expects single-channel volumes");
  require(f->val().dims() == m->val().dims(), "lncc grids differ");
  require(window >= 3 && window % 2 == 1,
          "lncc window must be odd and at least 3");
  const Dims3 d = f->val().dims();
  const i64 n = d.voxels();
  const int radius = window / 2;

  // Window sums via separable clamped box filters.
  std::vector<T> tmp(static_cast<size_t>(n)), prod(static_cast<size_t>(n));
  auto boxed = [&](const T* src) {
    std::vector<T> out(static_cast<size_t>(n));
    detail::box3<T>(src, out.data(), tmp.data(), d, radius);
    return out;
  };
  const T* fv = f->val().data();
  const T* mv = m->val().data();
  const std::vector<T> sf = boxed(fv);
  const std::vector<T> sm = boxed(mv);
  for (i64 i = 0; i < n; ++i) prod[size_t(i)] = fv[i] * fv[i];
  const std::vector<T> sff = boxed(prod.data());
  for (i64 i = 0; i < n; ++i) prod[size_t(i)] = mv[i] * mv[i];
  const std::vector<T> smm = boxed(prod.data());
  for (i64 i = 0; i < n; ++i) prod[size_t(i)] = fv[i] * mv[i];
  const std::vector<T> sfm = boxed(prod.data());
  std::vector<T> cnt;
  detail::box3_counts<T>(cnt, d, radius);

  // Per-voxel adjoint coefficients for the backward pass:
  // d(cc_i)/dF_j = (1/n_i) [A_i (M_j - Mbar_i) + Bf_i (F_j - Fbar_i)]
  // for j in the window of i, and symmetrically for M with Bm. Clamped
  // windows are symmetric (j in W_i iff i in W_j), so summing over i
  // reduces to one more box filter over each coefficient field.
  auto fbar = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  auto mbar = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  auto a_c = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  auto bf_c = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  auto bm_c = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const size_t s = size_t(i);
    const double nn = double(cnt[s]);
    const double fb = double(sf[s]) / nn;
    const double mb = double(sm[s]) / nn;
    const double cov = double(sfm[s]) / nn - fb * mb;
    const double varf = std::max(0.0, double(sff[s]) / nn - fb * fb);
    const double varm = std::max(0.0, double(smm[s]) / nn - mb * mb);
    const double denom = std::sqrt(varf * varm);
    (*fbar)[s] = T(fb);
    (*mbar)[s] = T(mb);
    if (denom < kLnccEps) {
      (*a_c)[s] = T(0);
      (*bf_c)[s] = T(0);
      (*bm_c)[s] = T(0);
      continue;
    }
    const double cc = cov / denom;
    acc += cc;
    (*a_c)[s] = T(1.0 / (denom * nn));
    (*bf_c)[s] = T(-cov / (varf * denom * nn));
    (*bm_c)[s] = T(-cov / (varm * denom * nn));
  }

  const bool needs = nets::detail::any_parent_needs<T>({f, m});
  Node<T>* out = detail::scalar_node(t, T(acc / double(n)), needs);
  if (needs)
    out->back = [f, m, out, d, n, radius, fbar, mbar, a_c, bf_c, bm_c]() {
      const T g = out->grad().data()[0] / T(n);
      std::vector<T> tmp2(static_cast<size_t>(n)), coef(static_cast<size_t>(n)), abox(static_cast<size_t>(n)),
          bbox(static_cast<size_t>(n)), cbox(static_cast<size_t>(n));
      detail::box3<T>(a_c->data(), abox.data(), tmp2.data(), d, radius);
      const T* fv2 = f->val().data();
      const T* mv2 = m->val().data();
      // gradient for F: g * [M_j * box(A) + F_j * box(Bf) - box(A*Mbar + Bf*Fbar)]
      if (f->needs_grad()) {
        detail::box3<T>(bf_c->data(), bbox.data(), tmp2.data(), d, radius);
        for (i64 i = 0; i < n; ++i) {
          const size_t s = size_t(i);
          coef[s] = (*a_c)[s] * (*mbar)[s] + (*bf_c)[s] * (*fbar)[s];
        }
        detail::box3<T>(coef.data(), cbox.data(), tmp2.data(), d, radius);
        T* gf = f->grad().data();
        for (i64 i = 0; i < n; ++i) {
          const size_t s = size_t(i);
          gf[i] += g * (mv2[i] * abox[s] + fv2[i] * bbox[s] - cbox[s]);
        }
      }
      if (m->needs_grad()) {
        detail::box3<T>(bm_c->data(), bbox.data(), tmp2.data(), d, radius);
        for (i64 i = 0; i < n; ++i) {
          const size_t s = size_t(i);
          coef[s] = (*a_c)[s] * (*fbar)[s] + (*bm_c)[s] * (*mbar)[s];
        }
        detail::box3<T>(coef.data(), cbox.data(), tmp2.data(), d, radius);
        T* gm = m->grad().data();
        for (i64 i = 0; i < n; ++i) {
          const size_t s = size_t(i);
          gm[i] += g * (fv2[i] * abox[s] + mv2[i] * bbox[s] - cbox[s]);
        }
      }
    };
  return out;
}

/// Diffusion regularizer: squared forward differences of every displacement
/// component along every axis, averaged over voxels (or summed with the
/// sum-form flag).
template <typename T>
Node<T>* smoothness_loss(Tape<T>& t, Node<T>* field, bool sum_form = false) {
  require(field->val().c() == 3, "smoothness expects a 3-channel field");
  const Dims3 d = field->val().dims();
  const double scale = sum_form ? 1.0 : 1.0 / double(d.voxels());
  double acc = 0.0;
  for (int c = 0; c < 3; ++c) {
    const T* u = field->val().chan(c);
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          const i64 i = (i64(z) * d.h + y) * d.w + x;
          if (x + 1 < d.w) {
            const double dd = double(u[i + 1]) - double(u[i]);
            acc += dd * dd;
          }
          if (y + 1 < d.h) {
            const double dd = double(u[i + d.w]) - double(u[i]);
            acc += dd * dd;
          }
          if (z + 1 < d.d) {
            const double dd = double(u[i + i64(d.h) * d.w]) - double(u[i]);
            acc += dd * dd;
          }
        }
  }
  Node<T>* out =
      detail::scalar_node(t, T(acc * scale), field->needs_grad());
  if (field->needs_grad())
    out->back = [field, out, d, scale]() {
      const T g = out->grad().data()[0] * T(2.0 * scale);
      for (int c = 0; c < 3; ++c) {
        const T* u = field->val().chan(c);
        T* gu = field->grad().chan(c);
        for (int z = 0; z < d.d; ++z)
          for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x) {
              const i64 i = (i64(z) * d.h + y) * d.w + x;
              if (x + 1 < d.w) {
                const T dd = u[i + 1] - u[i];
                gu[i + 1] += g * dd;
                gu[i] -= g * dd;
              }
              if (y + 1 < d.h) {
                const T dd = u[i + d.w] - u[i];
                gu[i + d.w] += g * dd;
                gu[i] -= g * dd;
              }
              if (z + 1 < d.d) {
                const T dd = u[i + i64(d.h) * d.w] - u[i];
                gu[i + i64(d.h) * d.w] += g * dd;
                gu[i] -= g * dd;
              }
            }
      }
    };
  return out;
}

struct RegLossParts {
  double similarity = 0.0;  // 1 - lncc
  double smooth = 0.0;
  double total = 0.0;
};

template <typename T>
struct RegLossNodes {
  Node<T>* warped = nullptr;
  Node<T>* total = nullptr;
};

/// Registration objective: (1 - lncc(fixed, warp(moving, field))) plus
/// lambda_smooth times the diffusion regularizer of the field.
template <typename T>
RegLossNodes<T> registration_loss(Tape<T>& t, Node<T>* fixed,
                                  Node<T>* moving, Node<T>* field,
                                  const LossWeights& w,
                                  RegLossParts* parts = nullptr) {
  w.validate();
  RegLossNodes<T> out;
  out.warped = nets::warp(t, moving, field);
  Node<T>* cc = lncc(t, fixed, out.warped, w.lncc_window);
  Node<T>* sim =
      nets::sub_nodes(t, detail::scalar_node(t, T(1), false),
                      cc);
  Node<T>* smooth = smoothness_loss(t, field, w.smooth_sum_form);
  out.total = nets::add_nodes(
      t, sim, nets::scale(t, smooth, T(w.lambda_smooth)));
  if (parts != nullptr) {
    parts->similarity = double(sim->val().data()[0]);
    parts->smooth = double(smooth->val().data()[0]);
    parts->total = double(out.total->val().data()[0]);
  }
  return out;
}

template <typename T>
struct CycleGanModels {
  nets::Generator<T>& g_ab;  // domain A (neonatal) to domain B (6-month)
  nets::Generator<T>& g_ba;
  nets::Discriminator<T>& d_a;
  nets::Discriminator<T>& d_b;
  nets::Segmenter<T>* seg = nullptr;  // required when lambda_seg > 0
};

template <typename T>
struct CycleGanResult {
  Node<T>* gen_total = nullptr;  // on the generator tape
  Node<T>* d_a_total = nullptr;  // on the domain-A discriminator tape
  Node<T>* d_b_total = nullptr;  // on the domain-B discriminator tape
  /// Detached generator outputs, for the discriminator step and logging.
  Tensor<T> fake_a, fake_b;
  /// Component values in evaluation order, for step logs.
  std::vector<std::pair<std::string, double>> components;

  double component(const std::string& name) const {
    for (const auto& [k, v] : components)
      if (k == name) return v;
    fail("unknown loss component: " + name);
  }
};

/// The full four-term objective plus the optional segmentation term on the
/// translated domain-A volume. The generator objective lives on gen_tape;
/// each discriminator objective lives on its own tape and sees the
/// generator outputs as constants (detached), so its backward pass cannot
/// reach the generators. Discriminator objectives use the conventional
/// halved sum of the real and fake terms.
template <typename T>
CycleGanResult<T> cyclegan_total(Tape<T>& gen_tape, Tape<T>& d_a_tape,
                                 Tape<T>& d_b_tape,
                                 const CycleGanModels<T>& nets_,
                                 const Tensor<T>& real_a,
                                 const Tensor<T>& real_b,
                                 const vol::LabelMap* labels_a,
                                 const LossWeights& w) {
  w.validate();
  const bool with_seg = w.lambda_seg > 0.0;
  require(!with_seg || labels_a != nullptr,
          "cyclegan: missing labels for the domain-A batch");
  require(!with_seg || nets_.seg != nullptr,
          "cyclegan: missing segmenter for the segmentation term");

  CycleGanResult<T> r;
  auto log = [&r](const std::string& name, Node<T>* node) {
    r.components.emplace_back(name, double(node->val().data()[0]));
    return node;
  };

  Node<T>* a = gen_tape.input(real_a, false);
  Node<T>* b = gen_tape.input(real_b, false);
  Node<T>* fake_b = nets_.g_ab.forward(gen_tape, a);
  Node<T>* fake_a = nets_.g_ba.forward(gen_tape, b);
  r.fake_a = fake_a->val();
  r.fake_b = fake_b->val();

  Node<T>* adv_ab =
      log("adv_ab", lsgan_loss(gen_tape, nets_.d_b.forward(gen_tape, fake_b),
                               true));
  Node<T>* adv_ba =
      log("adv_ba", lsgan_loss(gen_tape, nets_.d_a.forward(gen_tape, fake_a),
                               true));
  Node<T>* cyc_a = log(
      "cycle_a", mae_loss(gen_tape, nets_.g_ba.forward(gen_tape, fake_b), a));
  Node<T>* cyc_b = log(
      "cycle_b", mae_loss(gen_tape, nets_.g_ab.forward(gen_tape, fake_a), b));
  Node<T>* idt_a = log(
      "ident_a", mae_loss(gen_tape, nets_.g_ba.forward(gen_tape, a), a));
  Node<T>* idt_b = log(
      "ident_b", mae_loss(gen_tape, nets_.g_ab.forward(gen_tape, b), b));

  Node<T>* total = nets::add_nodes(gen_tape, adv_ab, adv_ba);
  total = nets::add_nodes(
      gen_tape, total,
      nets::scale(gen_tape, nets::add_nodes(gen_tape, cyc_a, cyc_b),
                  T(w.lambda_cycle)));
  total = nets::add_nodes(
      gen_tape, total,
      nets::scale(gen_tape, nets::add_nodes(gen_tape, idt_a, idt_b),
                  T(w.lambda_identity)));
  if (with_seg) {
    Node<T>* seg = log(
        "seg", seg_loss(gen_tape, nets_.seg->forward(gen_tape, fake_b),
                        *labels_a));
    total = nets::add_nodes(gen_tape, total,
                            nets::scale(gen_tape, seg, T(w.lambda_seg)));
  }
  r.gen_total = log("gen_total", total);

  auto disc_objective = [&](Tape<T>& dt, nets::Discriminator<T>& d,
                            const Tensor<T>& real, const Tensor<T>& fake,
                            const std::string& tag) {
    Node<T>* real_term =
        log(tag + "_real",
            lsgan_loss(dt, d.forward(dt, dt.input(real, false)), true));
    Node<T>* fake_term =
        log(tag + "_fake",
            lsgan_loss(dt, d.forward(dt, dt.input(fake, false)), false));
    return log(tag, nets::scale(
                        dt, nets::add_nodes(dt, real_term, fake_term),
                        T(0.5)));
  };
  r.d_a_total = disc_objective(d_a_tape, nets_.d_a, real_a, r.fake_a, "d_a");
  r.d_b_total = disc_objective(d_b_tape, nets_.d_b, real_b, r.fake_b, "d_b");
  return r;
}

}  // namespace iseg::losses
