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

#include "iseg/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "iseg/core/parallel.hpp"
#include "iseg/core/rng.hpp"
#include "iseg/kernels/kernels.hpp"
#include "iseg/vol/nifti.hpp"

namespace iseg::phantom {
namespace fs = std::filesystem;

void PhantomConfig::validate() const {
  require(grid >= 32, "phantom grid must be at least 32 voxels per axis");
  require(spacing > 0.0, "phantom spacing must be positive");
  require(contrast_gap >= 0.0 && contrast_gap <= 1.0,
          "contrast_gap must lie in [0, 1]");
  require(noise_std >= 0.0 && bias_amplitude >= 0.0 &&
              deform_amplitude >= 0.0 && deform_smoothness > 0.0,
          "phantom noise/bias/deformation parameters must be nonnegative");
  auto finite = [](const std::array<double, 9>& a) {
    for (double v : a)
      if (!std::isfinite(v)) return false;
    return true;
  };
  require(finite(means_neo_t2) && finite(means_m6_t1) && finite(means_m6_t2),
          "phantom intensity means must be finite");
}

namespace {

nlohmann::ordered_json means_to_json(const std::array<double, 9>& m) {
  nlohmann::ordered_json j;
  for (int i = 0; i < 9; ++i) j[vol::tissue_name(i)] = m[size_t(i)];
  return j;
}

std::array<double, 9> means_from_json(const nlohmann::json& j) {
  std::array<double, 9> m{};
  for (int i = 0; i < 9; ++i) m[size_t(i)] = j.at(vol::tissue_name(i)).get<double>();
  return m;
}

}  // namespace

void to_json(nlohmann::ordered_json& j, const PhantomConfig& c) {
  j = nlohmann::ordered_json{
      {"grid", c.grid},
      {"spacing", c.spacing},
      {"means_neo_t2", means_to_json(c.means_neo_t2)},
      {"means_m6_t1", means_to_json(c.means_m6_t1)},
      {"means_m6_t2", means_to_json(c.means_m6_t2)},
      {"contrast_gap", c.contrast_gap},
      {"noise_std", c.noise_std},
      {"bias_amplitude", c.bias_amplitude},
      {"deform_amplitude", c.deform_amplitude},
      {"deform_smoothness", c.deform_smoothness},
  };
}

void from_json(const nlohmann::json& j, PhantomConfig& c) {
  c = PhantomConfig{};
  if (j.contains("grid")) c.grid = j.at("grid").get<int>();
  if (j.contains("spacing")) c.spacing = j.at("spacing").get<double>();
  if (j.contains("means_neo_t2")) c.means_neo_t2 = means_from_json(j.at("means_neo_t2"));
  if (j.contains("means_m6_t1")) c.means_m6_t1 = means_from_json(j.at("means_m6_t1"));
  if (j.contains("means_m6_t2")) c.means_m6_t2 = means_from_json(j.at("means_m6_t2"));
  if (j.contains("contrast_gap")) c.contrast_gap = j.at("contrast_gap").get<double>();
  if (j.contains("noise_std")) c.noise_std = j.at("noise_std").get<double>();
  if (j.contains("bias_amplitude"))
    c.bias_amplitude = j.at("bias_amplitude").get<double>();
  if (j.contains("deform_amplitude"))
    c.deform_amplitude = j.at("deform_amplitude").get<double>();
  if (j.contains("deform_smoothness"))
    c.deform_smoothness = j.at("deform_smoothness").get<double>();
  c.validate();
}

namespace {

constexpr int kJitterStream = 1;
constexpr int kFieldStream = 2;
constexpr int kBiasNoiseStreamBase = 3;  // +0 neo_t2, +1 m6_t1, +2 m6_t2

struct Blob {
  std::array<double, 3> c, r;  // center and radii, normalized [-1,1] coords
  int label;
  bool wobbly;
};

struct Anatomy {
  std::vector<Blob> blobs;  // applied in order, later entries override
  std::array<double, 4> wobble_phase;
};

// Baseline structures: x lateral, y posterior-positive, z superior-positive.
Anatomy make_anatomy(Rng& rng) {
  std::vector<Blob> b = {
      {{0.00, 0.02, -0.02}, {0.92, 0.94, 0.90}, int(vol::Tissue::csf), true},
      {{0.00, -0.02, 0.12}, {0.78, 0.82, 0.70}, int(vol::Tissue::gm), true},
      {{0.00, -0.02, 0.14}, {0.62, 0.66, 0.54}, int(vol::Tissue::wm), true},
      {{0.00, 0.52, -0.46}, {0.42, 0.30, 0.24}, int(vol::Tissue::cerebellum), false},
      {{0.00, 0.10, -0.52}, {0.15, 0.17, 0.30}, int(vol::Tissue::brainstem), false},
      {{0.16, -0.02, 0.18}, {0.10, 0.24, 0.13}, int(vol::Tissue::ventricle), false},
      {{-0.16, -0.02, 0.18}, {0.10, 0.24, 0.13}, int(vol::Tissue::ventricle), false},
      {{0.30, 0.02, 0.06}, {0.13, 0.16, 0.13}, int(vol::Tissue::basal_ganglia), false},
      {{-0.30, 0.02, 0.06}, {0.13, 0.16, 0.13}, int(vol::Tissue::basal_ganglia), false},
      {{0.27, 0.18, -0.12}, {0.10, 0.17, 0.09}, int(vol::Tissue::hippocampus_amygdala), false},
      {{-0.27, 0.18, -0.12}, {0.10, 0.17, 0.09}, int(vol::Tissue::hippocampus_amygdala), false},
  };
  Anatomy a;
  for (auto& blob : b) {
    for (auto& c : blob.c) c += rng.uniform(-0.02, 0.02);
    for (auto& r : blob.r) r *= rng.uniform(0.95, 1.05);
    a.blobs.push_back(blob);
  }
  for (auto& p : a.wobble_phase) p = rng.uniform(0.0, 2.0 * 3.14159265358979);
  return a;
}

double wobble(const Anatomy& a, double x, double y, double z) {
  return 0.08 * std::sin(2.3 * x + a.wobble_phase[0]) *
         std::sin(1.9 * y + a.wobble_phase[1]) *
         std::sin(2.1 * z + a.wobble_phase[2]);
}

void paint_labels(const Anatomy& a, vol::LabelMap& lm) {
  const int n = lm.nx();
  for (int z = 0; z < n; ++z) {
    const double uz = 2.0 * (z + 0.5) / n - 1.0;
    for (int y = 0; y < n; ++y) {
      const double uy = 2.0 * (y + 0.5) / n - 1.0;
      for (int x = 0; x < n; ++x) {
        const double ux = 2.0 * (x + 0.5) / n - 1.0;
        const double w = wobble(a, ux, uy, uz);
        int label = 0;
        for (const auto& b : a.blobs) {
          const double dx = (ux - b.c[0]) / b.r[0];
          const double dy = (uy - b.c[1]) / b.r[1];
          const double dz = (uz - b.c[2]) / b.r[2];
          const double q = dx * dx + dy * dy + dz * dz;
          if (q <= 1.0 + (b.wobbly ? w : 0.0)) label = b.label;
        }
        lm.at(x, y, z) = std::uint8_t(label);
      }
    }
  }
}

// Separable Gaussian blur with clamped borders, one channel.
void gaussian_blur(float* data, Dims3 d, double sigma) {
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(size_t(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[size_t(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += k[size_t(i + radius)];
  }
  for (auto& v : k) v /= ksum;

  std::vector<float> tmp(size_t(d.voxels()));
  const int nn[3] = {d.w, d.h, d.d};
  const i64 strides[3] = {1, d.w, i64(d.w) * d.h};
  for (int axis = 0; axis < 3; ++axis) {
    const int n = nn[axis];
    const i64 stride = strides[axis];
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          const i64 idx = (i64(z) * d.h + y) * d.w + x;
          const int c = axis == 0 ? x : axis == 1 ? y : z;
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            const int cc = std::clamp(c + i, 0, n - 1);
            acc += k[size_t(i + radius)] * data[idx + i64(cc - c) * stride];
          }
          tmp[size_t(idx)] = float(acc);
        }
    std::copy(tmp.begin(), tmp.end(), data);
  }
}

vol::Field make_field(Rng& rng, int grid, double spacing,
                      const PhantomConfig& cfg) {
  vol::Field f(Dims3{grid, grid, grid}, {spacing, spacing, spacing});
  if (cfg.deform_amplitude == 0.0) {
    f.data.fill(0.0f);
    return f;
  }
  for (i64 i = 0; i < f.data.size(); ++i)
    f.data.data()[i] = float(rng.normal());
  for (int c = 0; c < 3; ++c)
    gaussian_blur(f.data.chan(c), f.data.dims(), cfg.deform_smoothness);

  double max_norm = 0.0;
  const i64 n = f.data.spatial();
  for (i64 i = 0; i < n; ++i) {
    const double ux = f.data.chan(0)[i], uy = f.data.chan(1)[i],
                 uz = f.data.chan(2)[i];
    max_norm = std::max(max_norm, std::sqrt(ux * ux + uy * uy + uz * uz));
  }
  if (max_norm > 0.0) {
    const float s = float(cfg.deform_amplitude / max_norm);
    kern::scal(f.data.size(), s, f.data.data());
  }
  return f;
}

vol::LabelMap warp_labels_nearest(const vol::LabelMap& lm,
                                  const vol::Field& field) {
  vol::LabelMap out = lm;
  const Dims3 d = lm.data.dims();
  auto clampi = [](int v, int hi) { return std::min(std::max(v, 0), hi); };
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        const i64 i = (i64(z) * d.h + y) * d.w + x;
        const int sx =
            clampi(int(std::llround(x + field.data.chan(0)[i])), d.w - 1);
        const int sy =
            clampi(int(std::llround(y + field.data.chan(1)[i])), d.h - 1);
        const int sz =
            clampi(int(std::llround(z + field.data.chan(2)[i])), d.d - 1);
        out.data.at(0, z, y, x) = lm.data.at(0, sz, sy, sx);
      }
  return out;
}

// mean + multiplicative bias + additive Gaussian noise, clamped nonnegative.
vol::Volume render_volume(Rng& rng, const vol::LabelMap& lm,
                          const std::array<double, 9>& means,
                          const PhantomConfig& cfg, vol::Modality mod) {
  struct Wave {
    std::array<double, 3> k;
    double phase;
  };
  std::array<Wave, 3> waves;
  for (auto& w : waves) {
    for (auto& kk : w.k) kk = rng.uniform(2.0, 5.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    w.phase = rng.uniform(0.0, 2.0 * 3.14159265358979);
  }

  vol::Volume v(lm.data.dims(), lm.spacing);
  v.affine = lm.affine;
  v.modality = mod;
  const int n = lm.nx();
  for (int z = 0; z < lm.nz(); ++z) {
    const double uz = 2.0 * (z + 0.5) / n - 1.0;
    for (int y = 0; y < lm.ny(); ++y) {
      const double uy = 2.0 * (y + 0.5) / n - 1.0;
      for (int x = 0; x < lm.nx(); ++x) {
        const double ux = 2.0 * (x + 0.5) / n - 1.0;
        double s = 0.0;
        for (const auto& w : waves)
          s += std::cos(w.k[0] * ux + w.k[1] * uy + w.k[2] * uz + w.phase);
        const double b = 1.0 + cfg.bias_amplitude * (s / 3.0);
        const double mean = means[lm.at(x, y, z)];
        const double noisy = mean * b + cfg.noise_std * rng.normal();
        v.at(x, y, z) = float(std::max(0.0, noisy));
      }
    }
  }
  return v;
}

std::array<double, 9> effective_means(const std::array<double, 9>& base,
                                      double gap) {
  auto m = base;
  const double gm = m[size_t(vol::Tissue::gm)];
  const double wm = m[size_t(vol::Tissue::wm)];
  m[size_t(vol::Tissue::wm)] = gm + (wm - gm) * gap;
  return m;
}

}  // namespace

void require_all_tissues(const vol::LabelMap& lm, const std::string& what) {
  std::array<i64, 9> counts{};
  for (i64 i = 0; i < lm.data.size(); ++i) {
    const std::uint8_t code = lm.data.data()[i];
    require(code < vol::kNumLabels, "label code out of range");
    ++counts[code];
  }
  for (int code = 1; code < vol::kNumLabels; ++code)
    if (counts[size_t(code)] == 0)
      fail("phantom geometry degenerate in " + what + ": tissue '" +
           vol::tissue_name(code) + "' has zero voxels");
}

PhantomSubject generate_subject(std::uint64_t seed, const PhantomConfig& cfg) {
  cfg.validate();

  PhantomSubject s;
  s.seed = seed;

  Rng jitter_rng(Rng::derive(seed, kJitterStream));
  const Anatomy anatomy = make_anatomy(jitter_rng);

  const std::array<double, 3> sp{cfg.spacing, cfg.spacing, cfg.spacing};
  s.labels_neo = vol::LabelMap(Dims3{cfg.grid, cfg.grid, cfg.grid}, sp);
  paint_labels(anatomy, s.labels_neo);
  require_all_tissues(s.labels_neo, "labels_neo");

  Rng field_rng(Rng::derive(seed, kFieldStream));
  s.true_field = make_field(field_rng, cfg.grid, cfg.spacing, cfg);
  s.labels_m6 = warp_labels_nearest(s.labels_neo, s.true_field);
  require_all_tissues(s.labels_m6, "labels_m6");

  Rng neo_rng(Rng::derive(seed, kBiasNoiseStreamBase + 0));
  Rng t1_rng(Rng::derive(seed, kBiasNoiseStreamBase + 1));
  Rng t2_rng(Rng::derive(seed, kBiasNoiseStreamBase + 2));
  s.neo_t2 = render_volume(neo_rng, s.labels_neo, cfg.means_neo_t2, cfg,
                           vol::Modality::t2w);
  s.m6_t1 = render_volume(t1_rng, s.labels_m6,
                          effective_means(cfg.means_m6_t1, cfg.contrast_gap),
                          cfg, vol::Modality::t1w);
  s.m6_t2 = render_volume(t2_rng, s.labels_m6,
                          effective_means(cfg.means_m6_t2, cfg.contrast_gap),
                          cfg, vol::Modality::t2w);
  return s;
}

std::vector<std::string> CohortManifest::all_ids() const {
  auto ids = train_ids;
  ids.insert(ids.end(), test_ids.begin(), test_ids.end());
  return ids;
}

std::string CohortManifest::subject_dir(const std::string& id) const {
  return (fs::path(dir) / id).string();
}

CohortManifest generate_cohort(const std::string& dir, int n,
                               std::uint64_t base_seed,
                               const PhantomConfig& cfg,
                               double train_fraction) {
  cfg.validate();
  require(n >= 2, "cohort needs at least 2 subjects");
  require(train_fraction > 0.0 && train_fraction < 1.0,
          "train_fraction must lie strictly inside (0, 1)");

  const int n_train =
      std::clamp(int(std::floor(n * train_fraction)), 1, n - 1);

  CohortManifest m;
  m.dir = dir;
  m.base_seed = base_seed;
  m.cfg = cfg;
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "sub-%03d", i);
    ids.emplace_back(buf);
  }
  m.train_ids.assign(ids.begin(), ids.begin() + n_train);
  m.test_ids.assign(ids.begin() + n_train, ids.end());

  fs::create_directories(dir);
  parallel_for(n, [&](i64 i) {
    const auto sub = generate_subject(base_seed + std::uint64_t(i), cfg);
    const fs::path sdir = fs::path(dir) / ids[size_t(i)];
    fs::create_directories(sdir);
    vol::save_volume(sub.neo_t2, (sdir / "neo_T2.nii.gz").string());
    vol::save_volume(sub.m6_t1, (sdir / "m6_T1.nii.gz").string());
    vol::save_volume(sub.m6_t2, (sdir / "m6_T2.nii.gz").string());
    vol::save_labels(sub.labels_neo, (sdir / "labels_neo.nii.gz").string());
    vol::save_labels(sub.labels_m6, (sdir / "labels_m6.nii.gz").string());
    vol::save_field(sub.true_field, (sdir / "field.nii.gz").string());
  });

  nlohmann::ordered_json j;
  j["train"] = m.train_ids;
  j["test"] = m.test_ids;
  j["base_seed"] = base_seed;
  nlohmann::ordered_json seeds;
  for (int i = 0; i < n; ++i) seeds[ids[size_t(i)]] = base_seed + std::uint64_t(i);
  j["seeds"] = seeds;
  nlohmann::ordered_json cfg_json;
  to_json(cfg_json, cfg);
  j["config"] = cfg_json;

  std::ofstream f(fs::path(dir) / "manifest.json", std::ios::trunc);
  require(f.good(), "cannot write manifest.json in " + dir);
  f << j.dump(2) << "\n";
  require(f.good(), "manifest write failed in " + dir);
  return m;
}

CohortManifest load_manifest(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  require(f.good(), "no manifest.json in " + dir);
  const auto j = nlohmann::json::parse(f);

  CohortManifest m;
  m.dir = dir;
  m.train_ids = j.at("train").get<std::vector<std::string>>();
  m.test_ids = j.at("test").get<std::vector<std::string>>();
  m.base_seed = j.at("base_seed").get<std::uint64_t>();
  from_json(j.at("config"), m.cfg);
  return m;
}

}  // namespace iseg::phantom
