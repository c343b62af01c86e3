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

// Native preprocessing chain for 6-month scans: polynomial bias-field
// correction (with an external-command escape hatch), threshold-and-
// morphology skull stripping, rigid within-subject alignment, and
// mask-driven cropping. Every op is deterministic given its inputs;
// per-subject work can run in parallel.

#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "iseg/vol/volume.hpp"
#include "json.hpp"

namespace iseg::prep {

/// Half-open voxel index ranges [x0,x1) x [y0,y1) x [z0,z1).
struct CropBox {
  int x0 = 0, y0 = 0, z0 = 0;
  int x1 = 0, y1 = 0, z1 = 0;

  int nx() const { return x1 - x0; }
  int ny() const { return y1 - y0; }
  int nz() const { return z1 - z0; }
  bool operator==(const CropBox&) const = default;

  nlohmann::ordered_json to_json() const;
  static CropBox from_json(const nlohmann::json& j);
};

/// Six degrees of freedom: rotations in degrees applied about the fixed
/// volume's world center (x, then y, then z), followed by a translation in
/// fixed-grid voxel units.
struct RigidParams {
  std::array<double, 3> rot_deg{0.0, 0.0, 0.0};
  std::array<double, 3> trans_vox{0.0, 0.0, 0.0};
  bool converged = true;
  double ncc = 0.0;  // similarity at the returned parameters

  nlohmann::ordered_json to_json() const;
  static RigidParams from_json(const nlohmann::json& j);
};

struct BiasOptions {
  /// Maximum total degree of the log-domain polynomial.
  int order = 3;
  /// When nonempty, shells out instead of fitting natively. The template
  /// must contain {in}, {mask}, and {out} placeholders; the command must
  /// write a NIfTI volume to {out}.
  std::string external_cmd;
  /// Scratch directory for the external mode's temporary files.
  std::string work_dir = "/tmp";

  void validate() const;
};

struct RigidOptions {
  double init_trans_step = 2.0;  // voxels
  double init_rot_step = 2.0;    // degrees
  double tol_step = 0.01;        // convergence once all steps fall below
  int max_sweeps = 200;          // coordinate-descent sweep cap
  double min_overlap = 0.25;     // reject poses sampling less of the moving grid
  int sample_stride = 1;         // evaluate the similarity on every n-th voxel

  void validate() const;
};

struct StepStatus {
  std::string name;
  bool ok = true;
  std::string detail;
};

/// Everything the chain learned about one subject, serialized per subject.
/// The heavyweights (bias field, mask) live here in memory; the JSON holds
/// their summaries plus the full transform and crop parameters.
struct PreprocessReport {
  std::vector<StepStatus> steps;
  vol::Volume bias_field_t1, bias_field_t2;
  vol::LabelMap brain_mask;
  CropBox crop;
  RigidParams rigid;

  nlohmann::ordered_json to_json() const;
};

/// Divides out a smooth multiplicative field estimated as exp of a
/// least-squares polynomial fit to in-mask log intensities, normalized to
/// unit mean inside the mask. Nonpositive in-mask intensities are handled
/// by the shift policy: the fit and division run on a copy shifted just
/// above zero and the shift is removed afterwards (a warning lands in
/// `warning` when provided). Returns the corrected volume and the strictly
/// positive field on the full grid.
std::pair<vol::Volume, vol::Volume> correct_bias(
    const vol::Volume& v, const vol::LabelMap& mask,
    const BiasOptions& opt = {}, std::string* warning = nullptr);

/// Brain mask via Otsu thresholding, one round of morphological closing
/// (3x3x3 box), the largest 6-connected foreground component, and interior
/// hole filling. The result is binary and a single connected component.
vol::LabelMap strip_skull(const vol::Volume& v);

/// Sample `moving` on `fixed`'s grid under the rigid transform; outside
/// voxels read zero.
vol::Volume rigid_resample(const vol::Volume& moving,
                           const vol::Volume& fixed,
                           const RigidParams& params);

/// Coordinate-descent maximization of normalized cross correlation
/// magnitude over the six rigid parameters, starting from identity. The
/// magnitude keeps the objective usable for inverted-contrast pairs. When
/// `fixed_mask` is given, correlation is evaluated only over its nonzero
/// voxels; multi-modal pairs need this, since over the full grid the
/// head-versus-background envelope is nearly translation invariant and
/// drowns out the tissue signal. When the sweep cap is reached before the
/// steps shrink below tolerance the best parameters so far are returned
/// with `converged = false`.
std::pair<vol::Volume, RigidParams> rigid_align(
    const vol::Volume& moving, const vol::Volume& fixed,
    const RigidOptions& opt = {}, const vol::LabelMap* fixed_mask = nullptr);

/// Tight bounding box of the nonzero mask voxels, expanded by `margin`
/// and clamped to the grid. Throws on an empty mask.
CropBox mask_bounding_box(const vol::LabelMap& mask, int margin);

/// Extract the box; the affine origin shifts so world coordinates of the
/// content are unchanged.
vol::Volume crop(const vol::Volume& v, const CropBox& box);
vol::LabelMap crop_labels(const vol::LabelMap& lm, const CropBox& box);

/// Write `patch` back into `into` at the box location (inverse of crop).
void paste(const vol::Volume& patch, const CropBox& box, vol::Volume& into);

/// crop() at the mask's bounding box with margin.
vol::Volume crop_to_mask(const vol::Volume& v, const vol::LabelMap& mask,
                         int margin);

struct PreprocessOptions {
  BiasOptions bias;
  RigidOptions rigid;
  int crop_margin = 4;
  /// Resample the cropped results to this spacing when set.
  std::optional<std::array<double, 3>> target_spacing;
};

struct PreprocessResult {
  vol::Volume t1, t2;  // corrected, aligned (t1 onto t2), cropped
  vol::LabelMap mask;  // on the same cropped grid
  PreprocessReport report;
};

/// The full per-subject chain on a 6-month T1w/T2w pair: strip each
/// modality, correct bias, align T1 onto T2, mask from the T2 strip, crop
/// everything to the mask, optionally resample.
PreprocessResult preprocess_pair(const vol::Volume& t1, const vol::Volume& t2,
                                 const PreprocessOptions& opt = {});

}  // namespace iseg::prep
