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

// The three network families: an attention-gated segmentation U-Net, a
// CycleGAN generator/discriminator pair, and a displacement-field
// registration network. All are built on the tape ops with "same"-padded
// convolutions, so spatial resolution changes only through stride-2 encoders
// and nearest-neighbour upsampling.
//
// Filter lists are configurable (tests shrink them for finite-difference
// checks); the defaults follow the published designs. Normalization is
// per-channel instance norm, which behaves identically for any batch size.
// Each model documents its divisibility precondition, derived from how many
// stride-2 levels its filter list implies.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "iseg/nets/params.hpp"
#include "iseg/nets/tape.hpp"
#include "json.hpp"

namespace iseg::nets {

struct SegmenterConfig {
  int in_channels = 1;
  int out_channels = 9;
  std::vector<int> filters = {32, 64, 128, 256, 512};
  double lr = 0.0004;

  int levels() const { return int(filters.size()); }
  /// First level keeps full resolution, every later level halves it.
  int divisor() const { return 1 << (levels() - 1); }
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SegmenterConfig from_json(const nlohmann::json& j);
};

struct GanConfig {
  int in_channels = 1;
  int out_channels = 1;
  std::vector<int> gen_filters = {64, 128, 256, 512, 512};
  std::vector<int> disc_filters = {64, 128, 256, 512, 1};
  double lr = 0.0008;

  int gen_levels() const { return int(gen_filters.size()); }
  /// Every generator encoder level is stride 2.
  int gen_divisor() const { return 1 << gen_levels(); }
  /// Product of discriminator strides; the score map is the input grid
  /// divided by this, rounded up.
  int disc_stride_product() const { return 1 << int(disc_filters.size()); }
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static GanConfig from_json(const nlohmann::json& j);
};

struct RegNetConfig {
  std::vector<int> filters = {16, 32, 32, 32};
  double lr = 0.002;

  int levels() const { return int(filters.size()); }
  int divisor() const { return 1 << levels(); }
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static RegNetConfig from_json(const nlohmann::json& j);
};

inline void SegmenterConfig::validate() const {
  require(in_channels == 1 || in_channels == 2,
          "segmenter expects 1 or 2 input channels");
  require(out_channels >= 2, "segmenter needs at least 2 output classes");
  require(filters.size() >= 2, "segmenter needs at least 2 levels");
  for (int f : filters) require(f >= 1, "segmenter filters must be positive");
  require(lr > 0.0, "learning rate must be positive");
}

inline nlohmann::ordered_json SegmenterConfig::to_json() const {
  return nlohmann::ordered_json{{"in_channels", in_channels},
                                {"out_channels", out_channels},
                                {"filters", filters},
                                {"lr", lr}};
}

inline SegmenterConfig SegmenterConfig::from_json(const nlohmann::json& j) {
  SegmenterConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.filters = j.value("filters", c.filters);
  c.lr = j.value("lr", c.lr);
  c.validate();
  return c;
}

inline void GanConfig::validate() const {
  require(in_channels >= 1 && in_channels == out_channels,
          "cycle consistency needs matching generator in/out channels");
  require(gen_filters.size() >= 2, "generator needs at least 2 levels");
  for (int f : gen_filters)
    require(f >= 1, "generator filters must be positive");
  require(disc_filters.size() >= 2, "discriminator needs at least 2 layers");
  for (int f : disc_filters)
    require(f >= 1, "discriminator filters must be positive");
  require(disc_filters.back() == 1,
          "discriminator must end in a single score channel");
  require(lr > 0.0, "learning rate must be positive");
}

inline nlohmann::ordered_json GanConfig::to_json() const {
  return nlohmann::ordered_json{{"in_channels", in_channels},
                                {"out_channels", out_channels},
                                {"gen_filters", gen_filters},
                                {"disc_filters", disc_filters},
                                {"lr", lr}};
}

inline GanConfig GanConfig::from_json(const nlohmann::json& j) {
  GanConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.gen_filters = j.value("gen_filters", c.gen_filters);
  c.disc_filters = j.value("disc_filters", c.disc_filters);
  c.lr = j.value("lr", c.lr);
  c.validate();
  return c;
}

inline void RegNetConfig::validate() const {
  require(filters.size() >= 2, "regnet needs at least 2 levels");
  for (int f : filters) require(f >= 1, "regnet filters must be positive");
  require(lr > 0.0, "learning rate must be positive");
}

inline nlohmann::ordered_json RegNetConfig::to_json() const {
  return nlohmann::ordered_json{{"filters", filters}, {"lr", lr}};
}

inline RegNetConfig RegNetConfig::from_json(const nlohmann::json& j) {
  RegNetConfig c;
  c.filters = j.value("filters", c.filters);
  c.lr = j.value("lr", c.lr);
  c.validate();
  return c;
}

namespace detail {

template <typename T>
void add_conv_params(ParamSet<T>& ps, Rng& rng, const std::string& prefix,
                     int ci, int co, int k, bool norm) {
  ps.add(prefix + ".w", conv_init<T>(rng, co, ci, k));
  ps.add(prefix + ".b", const_init<T>(co, T(0)));
  if (norm) {
    ps.add(prefix + ".ng", const_init<T>(co, T(1)));
    ps.add(prefix + ".nb", const_init<T>(co, T(0)));
  }
}

template <typename T>
Node<T>* apply_conv(ParamSet<T>& ps, Tape<T>& t, const std::string& prefix,
                    Node<T>* x, int stride, bool norm) {
  Param<T>* w = ps.find(prefix + ".w");
  Param<T>* b = ps.find(prefix + ".b");
  require(w != nullptr && b != nullptr, "unknown conv block: " + prefix);
  Node<T>* y = conv3d(t, x, t.param(w->w, w->g), t.param(b->w, b->g), stride);
  if (norm) {
    Param<T>* ng = ps.find(prefix + ".ng");
    Param<T>* nb = ps.find(prefix + ".nb");
    require(ng != nullptr && nb != nullptr,
            "conv block has no norm parameters: " + prefix);
    y = instance_norm(t, y, t.param(ng->w, ng->g), t.param(nb->w, nb->g));
  }
  return y;
}

inline void check_divisible(const Dims3& d, int divisor, const char* what) {
  require(d.d % divisor == 0 && d.h % divisor == 0 && d.w % divisor == 0,
          std::string(what) + " input dims must be divisible by " +
              std::to_string(divisor));
}

}  // namespace detail

/// Attention U-Net. The first encoder level runs at full resolution, each
/// later level halves the grid with a stride-2 conv. Skip connections pass
/// through additive attention gates (1x1 convs on gating and skip signals,
/// ReLU, 1x1 to one channel, sigmoid, broadcast multiply) before
/// concatenation with the upsampled decoder path. The head is a 1x1 conv to
/// out_channels followed by a channel softmax.
template <typename T = float>
class Segmenter {
 public:
  static constexpr const char* kKind = "segmenter";

  explicit Segmenter(SegmenterConfig cfg, std::uint64_t seed = 1)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::derive(seed, 0xA11E);
    const auto& f = cfg_.filters;
    detail::add_conv_params(params, rng, "enc0", cfg_.in_channels, f[0], 3,
                            true);
    for (int l = 1; l < cfg_.levels(); ++l)
      detail::add_conv_params(params, rng, "enc" + std::to_string(l),
                              f[size_t(l - 1)], f[size_t(l)], 3, true);
    for (int l = cfg_.levels() - 1; l >= 1; --l) {
      const int fs = f[size_t(l - 1)];  // skip channels
      const int fg = f[size_t(l)];      // gating channels
      const int fi = std::max(fs / 2, 1);
      const std::string att = "att" + std::to_string(l - 1);
      detail::add_conv_params(params, rng, att + ".g", fg, fi, 1, false);
      detail::add_conv_params(params, rng, att + ".x", fs, fi, 1, false);
      detail::add_conv_params(params, rng, att + ".p", fi, 1, 1, false);
      detail::add_conv_params(params, rng, "dec" + std::to_string(l - 1),
                              fg + fs, fs, 3, true);
    }
    detail::add_conv_params(params, rng, "head", f[0], cfg_.out_channels, 1,
                            false);
  }

  /// Per-voxel class probabilities, channels summing to one.
  Node<T>* forward(Tape<T>& t, Node<T>* x) {
    require(x->val().c() == cfg_.in_channels,
            "segmenter input channels mismatch");
    detail::check_divisible(x->val().dims(), cfg_.divisor(), "segmenter");
    std::vector<Node<T>*> enc(size_t(cfg_.levels()));
    enc[0] = relu(t, detail::apply_conv(params, t, "enc0", x, 1, true));
    for (int l = 1; l < cfg_.levels(); ++l)
      enc[size_t(l)] =
          relu(t, detail::apply_conv(params, t, "enc" + std::to_string(l),
                                     enc[size_t(l - 1)], 2, true));
    Node<T>* d = enc[size_t(cfg_.levels() - 1)];
    for (int l = cfg_.levels() - 1; l >= 1; --l) {
      Node<T>* g = upsample2x(t, d);
      Node<T>* skip = enc[size_t(l - 1)];
      const std::string att = "att" + std::to_string(l - 1);
      Node<T>* q = relu(
          t,
          add_nodes(t, detail::apply_conv(params, t, att + ".g", g, 1, false),
                    detail::apply_conv(params, t, att + ".x", skip, 1,
                                       false)));
      Node<T>* a = sigmoid_op(
          t, detail::apply_conv(params, t, att + ".p", q, 1, false));
      Node<T>* gated = mul_broadcast(t, skip, a);
      d = relu(t, detail::apply_conv(params, t, "dec" + std::to_string(l - 1),
                                     concat(t, g, gated), 1, true));
    }
    return softmax_channels(
        t, detail::apply_conv(params, t, "head", d, 1, false));
  }

  const SegmenterConfig& cfg() const { return cfg_; }
  ParamSet<T> params;

 private:
  SegmenterConfig cfg_;
};

/// CycleGAN generator: a stride-2 encoder over gen_filters and a mirrored
/// decoder whose stage landing at level l-1 emits gen_filters[l] channels
/// (so with the default list the two innermost decoder stages keep 512),
/// with skip concatenations, then a 1x1 conv and tanh. Outputs live in
/// [-1, 1] like the normalized inputs, which keeps cycles composable.
template <typename T = float>
class Generator {
 public:
  static constexpr const char* kKind = "generator";

  explicit Generator(GanConfig cfg, std::uint64_t seed = 1)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::derive(seed, 0x6E4);
    const auto& f = cfg_.gen_filters;
    const int L = cfg_.gen_levels();
    int ci = cfg_.in_channels;
    for (int l = 0; l < L; ++l) {
      detail::add_conv_params(params, rng, "enc" + std::to_string(l), ci,
                              f[size_t(l)], 3, true);
      ci = f[size_t(l)];
    }
    for (int l = L - 1; l >= 1; --l) {
      const int prev = l == L - 1 ? f[size_t(l)] : f[size_t(l + 1)];
      detail::add_conv_params(params, rng, "dec" + std::to_string(l - 1),
                              prev + f[size_t(l - 1)], f[size_t(l)], 3, true);
    }
    detail::add_conv_params(params, rng, "dec_full", f[1], f[0], 3, true);
    detail::add_conv_params(params, rng, "head", f[0], cfg_.out_channels, 1,
                            false);
  }

  Node<T>* forward(Tape<T>& t, Node<T>* x) {
    require(x->val().c() == cfg_.in_channels,
            "generator input channels mismatch");
    detail::check_divisible(x->val().dims(), cfg_.gen_divisor(), "generator");
    const int L = cfg_.gen_levels();
    std::vector<Node<T>*> enc(static_cast<size_t>(L));
    Node<T>* h = x;
    for (int l = 0; l < L; ++l) {
      h = lrelu(t, detail::apply_conv(params, t, "enc" + std::to_string(l), h,
                                      2, true));
      enc[size_t(l)] = h;
    }
    Node<T>* d = enc[size_t(L - 1)];
    for (int l = L - 1; l >= 1; --l)
      d = relu(t, detail::apply_conv(
                      params, t, "dec" + std::to_string(l - 1),
                      concat(t, upsample2x(t, d), enc[size_t(l - 1)]), 1,
                      true));
    d = relu(t, detail::apply_conv(params, t, "dec_full", upsample2x(t, d), 1,
                                   true));
    return tanh_op(t, detail::apply_conv(params, t, "head", d, 1, false));
  }

  const GanConfig& cfg() const { return cfg_; }
  ParamSet<T> params;

 private:
  GanConfig cfg_;
};

/// PatchGAN critic: every layer is a stride-2 conv, leaky-ReLU between
/// layers, instance norm on the middle layers only, and the last layer maps
/// to one raw score channel. The output grid is the input divided by the
/// stride product, rounded up, so each score judges a patch.
template <typename T = float>
class Discriminator {
 public:
  static constexpr const char* kKind = "discriminator";

  explicit Discriminator(GanConfig cfg, std::uint64_t seed = 1)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::derive(seed, 0xD15C);
    const auto& f = cfg_.disc_filters;
    int ci = cfg_.in_channels;
    for (size_t l = 0; l < f.size(); ++l) {
      const bool norm = l != 0 && l + 1 != f.size();
      detail::add_conv_params(params, rng, "l" + std::to_string(l), ci, f[l],
                              3, norm);
      ci = f[l];
    }
  }

  /// Raw (un-squashed) patch scores; least-squares losses consume these.
  Node<T>* forward(Tape<T>& t, Node<T>* x) {
    require(x->val().c() == cfg_.in_channels,
            "discriminator input channels mismatch");
    const auto& f = cfg_.disc_filters;
    Node<T>* h = x;
    for (size_t l = 0; l < f.size(); ++l) {
      const bool norm = l != 0 && l + 1 != f.size();
      h = detail::apply_conv(params, t, "l" + std::to_string(l), h, 2, norm);
      if (l + 1 != f.size()) h = lrelu(t, h);
    }
    return h;
  }

  const GanConfig& cfg() const { return cfg_; }
  ParamSet<T> params;

 private:
  GanConfig cfg_;
};

/// Registration network: moving and fixed stack into a two-channel input, a
/// stride-2 encoder over the filter list and a mirrored decoder with skips
/// (plus the raw input re-concatenated at full resolution) regress a
/// 3-channel displacement field in voxel units. The final conv is
/// zero-initialized so an untrained network outputs the identity transform.
template <typename T = float>
class RegNet {
 public:
  static constexpr const char* kKind = "regnet";

  explicit RegNet(RegNetConfig cfg, std::uint64_t seed = 1)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::derive(seed, 0x4E6);
    const auto& f = cfg_.filters;
    const int L = cfg_.levels();
    int ci = 2;
    for (int l = 0; l < L; ++l) {
      detail::add_conv_params(params, rng, "enc" + std::to_string(l), ci,
                              f[size_t(l)], 3, false);
      ci = f[size_t(l)];
    }
    for (int l = L - 1; l >= 1; --l)
      detail::add_conv_params(params, rng, "dec" + std::to_string(l - 1),
                              f[size_t(l)] + f[size_t(l - 1)],
                              f[size_t(l - 1)], 3, false);
    detail::add_conv_params(params, rng, "dec_full", f[0] + 2, f[0], 3,
                            false);
    // Tensor value-initializes to zero, exactly the init the flow head needs.
    params.add("flow.w", Tensor<T>(3, Dims3{f[0], 3, 9}));
    params.add("flow.b", const_init<T>(3, T(0)));
  }

  /// moving and fixed are single-channel volumes on one grid; the result is
  /// a 3-channel displacement field (channels x/y/z, voxel units) on that
  /// grid.
  Node<T>* forward(Tape<T>& t, Node<T>* moving, Node<T>* fixed) {
    require(moving->val().c() == 1 && fixed->val().c() == 1,
            "regnet inputs must be single-channel");
    require(moving->val().dims() == fixed->val().dims(),
            "regnet grid mismatch");
    detail::check_divisible(moving->val().dims(), cfg_.divisor(), "regnet");
    Node<T>* x = concat(t, moving, fixed);
    const int L = cfg_.levels();
    std::vector<Node<T>*> enc(static_cast<size_t>(L));
    Node<T>* h = x;
    for (int l = 0; l < L; ++l) {
      h = lrelu(t, detail::apply_conv(params, t, "enc" + std::to_string(l), h,
                                      2, false));
      enc[size_t(l)] = h;
    }
    Node<T>* d = enc[size_t(L - 1)];
    for (int l = L - 1; l >= 1; --l)
      d = lrelu(t, detail::apply_conv(
                       params, t, "dec" + std::to_string(l - 1),
                       concat(t, upsample2x(t, d), enc[size_t(l - 1)]), 1,
                       false));
    d = lrelu(t, detail::apply_conv(params, t, "dec_full",
                                    concat(t, upsample2x(t, d), x), 1,
                                    false));
    return detail::apply_conv(params, t, "flow", d, 1, false);
  }

  const RegNetConfig& cfg() const { return cfg_; }
  ParamSet<T> params;

 private:
  RegNetConfig cfg_;
};

}  // namespace iseg::nets
