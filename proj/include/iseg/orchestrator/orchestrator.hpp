/* Copyright 2026 the isoseg authors
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

// Experiment orchestration for the five segmentation pipelines.
//
// Every run lives under <runs_root>/<run_name>/<stage>/ and leaves behind
// a config echo (config.json), an append-only epoch log (log.ndjson),
// checkpoint bundles with optimizer state, a resume cursor (state.json)
// and a completion marker (done.json). A stage that finds its own
// done.json refuses to run again unless overwrite is set; a stage that
// finds a cursor but no marker resumes from the last finished epoch and
// reproduces the uninterrupted run bit for bit.
//
// Stages form a small DAG. P3, P4 and P5 check for the completion
// markers of the stages they consume before loading any data, so a
// missing prerequisite fails fast with a message naming it.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "iseg/fusion/fusion.hpp"
#include "iseg/losses/losses.hpp"
#include "iseg/nets/models.hpp"
#include "iseg/phantom/phantom.hpp"
#include "iseg/vol/volume.hpp"
#include "json.hpp"

namespace iseg::orch {

enum class PipelineId { p1, p2, p3, p4, p5 };

/// Stable pipeline names used in configs, reports and run layouts.
const char* pipeline_name(PipelineId id);
PipelineId pipeline_from_name(const std::string& name);

/// Everything a run needs, serialized as strict JSON (unknown keys are
/// rejected so a typo cannot silently fall back to a default). The echo
/// written into each stage directory is enough to relaunch the run.
struct ExperimentConfig {
  std::string run_name = "run";
  std::string runs_root = "runs";
  std::string cohort;  // cohort directory holding manifest.json
  PipelineId pipeline = PipelineId::p1;
  std::uint64_t seed = 7;
  /// Kept in the echo for provenance. Training here is single threaded
  /// and bit reproducible in either mode; the flag records intent.
  bool exact = true;
  int epochs = 50;

  nets::SegmenterConfig segmenter;
  nets::GanConfig gan;
  nets::RegNetConfig regnet;
  losses::LossWeights weights;

  /// P5 pseudo-label input channels (T1, T2 or both).
  fusion::PseudoVariant variant = fusion::PseudoVariant::both;
  /// P3 normally fine-tunes the P2 segmenter; set to start from scratch.
  bool fresh_segmenter = false;
  /// P4 three-tissue map directory (one <subject_id>.nii.gz per subject).
  std::string three_tissue_dir;
  fusion::FusionRule rule;
  /// External three-tissue code mapping, e.g. "1:CSF,2:GM,3:WM".
  std::string code_map = "1:CSF,2:GM,3:WM";
  /// Brain mask used for normalization, inference restriction and fusion:
  /// "labels" takes the cohort ground-truth support, "strip" runs skull
  /// stripping on the input volume, "three" (P4 only) uses the nonzero
  /// support of the ingested three-tissue map.
  std::string mask_source = "labels";
  bool overwrite = false;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Resume cursor for a stage directory.
struct RunState {
  int completed_epochs = 0;
  bool done = false;
};

std::string stage_dir(const ExperimentConfig& cfg, const std::string& stage);
RunState read_run_state(const std::string& dir);

/// Map intensities into the band the networks train on: z-score within
/// the mask, shrink by four so about four standard deviations fit the
/// unit band, then clamp to [-1, 1]. Voxels outside the mask become zero.
vol::Volume to_model_space(const vol::Volume& v, const vol::LabelMap& mask);

/// Binary brain mask from the nonzero support of a label map.
vol::LabelMap mask_from_labels(const vol::LabelMap& labels);

/// Fraction of voxels where the deformation folds, i.e. where the
/// Jacobian determinant of x + u(x) is nonpositive. Gradients use
/// central differences inside the grid and one-sided stencils at the
/// faces. Accepts a three-channel displacement field.
double folding_fraction(const TensorF& field);

struct TrainResult {
  std::string dir;
  int epochs = 0;
  bool resumed = false;
  /// Last epoch record from the ndjson log.
  nlohmann::ordered_json last;
};

/// P1: attention segmenter trained on neonatal T2 with its own labels.
TrainResult train_p1(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg);

/// P2: joint CycleGAN translation plus segmentation on translated
/// volumes. The segmentation term backpropagates into the neonatal to
/// 6-month generator, so translation learns to preserve anatomy. Writes
/// five bundles (two generators, two discriminators, the segmenter).
TrainResult train_p2(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg);

/// P3: deformable registration of translated volumes onto real 6-month
/// volumes, then segmenter fine-tuning on the warped pairs. Requires a
/// completed p2 stage under the same run. Logs the folding fraction per
/// epoch and warns when it exceeds one percent.
TrainResult train_p3(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg);

struct P4Result {
  std::string dir;
  /// subject id to fused map path, successful subjects only.
  std::map<std::string, std::string> fused;
  /// "subject_id: reason" entries, one per failed subject.
  std::vector<std::string> failures;
};

/// P4: run the p2 segmenter on each subject's real 6-month T2 and fuse
/// the result with an external three-tissue map. A failing subject is
/// recorded and the batch continues; callers decide the exit status.
P4Result run_p4(const phantom::CohortManifest& cohort,
                const ExperimentConfig& cfg);

/// P5: fresh segmenter trained on 6-month images against the fused maps
/// produced by a completed p4 stage. The variant picks T1, T2 or both
/// input channels; the config's segmenter channel count must agree.
TrainResult train_p5(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg);

struct SweepRow {
  double lambda = 0.0;
  double similarity = 0.0;  // final epoch, 1 - lncc
  double smooth = 0.0;
  double total = 0.0;
  double fold_fraction = 0.0;
  std::string dir;
};

/// Smoothness-weight sweep for P3: one full registration run per lambda,
/// each in its own stage directory, plus a comparison table written as
/// sweep.csv and sweep.md under the run directory.
std::vector<SweepRow> sweep_p3(const phantom::CohortManifest& cohort,
                               const ExperimentConfig& cfg,
                               const std::vector<double>& lambdas);

/// Segmenter inference. Normalizes each input to model space with the
/// given mask, stacks them as channels, and argmaxes the class
/// probabilities; voxels outside the mask are background. The number of
/// images must match the model's input channels (a T1+T2 model fed a
/// lone T2 is a modality mismatch and an error). If an input already
/// looks normalized (in-mask mean near zero with the model-space spread)
/// a warning is reported through `warning` when given, since normalizing
/// twice silently shifts the intensity scale the model was trained on.
vol::LabelMap infer_labels(nets::Segmenter<float>& seg,
                           const std::vector<const vol::Volume*>& images,
                           const vol::LabelMap& mask,
                           std::string* warning = nullptr);

/// Load a segmenter bundle (any stage) and run infer_labels.
vol::LabelMap infer_bundle(const std::string& bundle_path,
                           const std::vector<const vol::Volume*>& images,
                           const vol::LabelMap& mask,
                           std::string* warning = nullptr);

}  // namespace iseg::orch
