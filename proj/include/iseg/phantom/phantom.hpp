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

#include "iseg/vol/volume.hpp"
#include "json.hpp"

// Deterministic synthetic cohort generator. Each subject is a paired
// "neonatal" T2w scan and "6-month" T1w/T2w scans of the same procedural
// anatomy, with ground-truth labels for both sessions and the exact
// displacement field relating them. The 6-month contrast collapses the
// WM/GM separation (and flips its sign on T2w) so the neonatal-trained
// baseline genuinely faces a domain gap.
namespace iseg::phantom {

struct PhantomConfig {
  int grid = 64;           // per-axis voxels, minimum 32
  double spacing = 1.0;    // isotropic, mm

  // Per-tissue mean intensities indexed by label code 0..8. The 6-month
  // tables hold the full-separation (contrast_gap = 1) WM value; the
  // effective WM mean is interpolated toward GM as the gap closes.
  std::array<double, 9> means_neo_t2 = {0.05, 0.95, 0.45, 0.70, 0.92,
                                        0.50, 0.55, 0.60, 0.52};
  std::array<double, 9> means_m6_t1 = {0.05, 0.15, 0.50, 0.85, 0.12,
                                       0.55, 0.60, 0.65, 0.55};
  std::array<double, 9> means_m6_t2 = {0.05, 0.90, 0.55, 0.25, 0.88,
                                       0.50, 0.45, 0.40, 0.50};

  double contrast_gap = 0.25;   // in [0,1]; 0 = 6-month WM/GM coincide
  double noise_std = 0.03;
  double bias_amplitude = 0.2;  // multiplicative smooth field, 1 +- amp
  double deform_amplitude = 2.5;   // max displacement, voxels
  double deform_smoothness = 6.0;  // Gaussian sigma of the field, voxels

  void validate() const;
};

void to_json(nlohmann::ordered_json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);

struct PhantomSubject {
  std::string subject_id;
  vol::Volume neo_t2, m6_t1, m6_t2;
  vol::LabelMap labels_neo, labels_m6;
  vol::Field true_field;  // labels_m6(x) == labels_neo(x + u(x))
  std::uint64_t seed = 0;
};

/// Throws if any tissue ends up with zero voxels, naming the tissue.
void require_all_tissues(const vol::LabelMap& lm, const std::string& what);

PhantomSubject generate_subject(std::uint64_t seed, const PhantomConfig& cfg);

struct CohortManifest {
  std::string dir;
  std::vector<std::string> train_ids, test_ids;
  std::uint64_t base_seed = 0;
  PhantomConfig cfg;

  std::vector<std::string> all_ids() const;
  std::string subject_dir(const std::string& id) const;
};

/// Writes `<dir>/<id>/{neo_T2,m6_T1,m6_T2,labels_neo,labels_m6,field}.nii.gz`
/// for n subjects (seed base_seed + index) plus `<dir>/manifest.json`. The
/// split takes floor(n * train_fraction) training subjects, clamped so both
/// sides keep at least one.
CohortManifest generate_cohort(const std::string& dir, int n,
                               std::uint64_t base_seed,
                               const PhantomConfig& cfg,
                               double train_fraction = 33.0 / 43.0);

CohortManifest load_manifest(const std::string& dir);

}  // namespace iseg::phantom
