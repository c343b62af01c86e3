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

// Per-tissue segmentation quality metrics and report emission.
//
// Distance metrics operate on object boundaries (6-neighborhood, see
// vol::extract_boundary) with an exact Euclidean distance transform, so
// hd95/assd agree with an all-pairs computation to the last bit. Percentiles
// use linear interpolation between order statistics: for n sorted values the
// p-th percentile sits at rank p/100 * (n-1).

#pragma once

#include <array>
#include <string>
#include <vector>

#include "iseg/vol/volume.hpp"

namespace iseg::metrics {

enum class Units { voxel, mm };

const char* units_name(Units u);

/// One (dice, hd95, assd) triple. NaN marks an undefined entry (tissue
/// missing from both maps, or a distance against an empty boundary).
struct TissueRow {
  double dice = 0.0;
  double hd95 = 0.0;
  double assd = 0.0;
};

/// Metrics for one subject: one row per foreground tissue code 1..8 plus the
/// unweighted average over the rows that are defined.
struct SubjectScores {
  std::string subject_id;
  std::array<TissueRow, vol::kNumLabels - 1> tissues;
  TissueRow average;
};

struct MetricReport {
  std::string pipeline;
  Units units = Units::voxel;
  std::vector<SubjectScores> subjects;
  /// Per-tissue means over subjects, NaN entries excluded.
  std::array<TissueRow, vol::kNumLabels - 1> tissue_means;
  /// How many subjects were excluded per tissue and metric column.
  std::array<std::array<int, 3>, vol::kNumLabels - 1> nan_counts{};
  /// Unweighted mean of the defined tissue_means rows.
  TissueRow average;
};

/// Linear-interpolated percentile of an ascending-sorted vector, p in
/// [0, 100].
double percentile(const std::vector<double>& sorted, double p);

/// 2|A^B| / (|A| + |B|). Both masks empty gives NaN, which reports exclude
/// from averages.
double dice(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt);

/// Max of the two directed 95th-percentile boundary distances. With
/// pooled=true takes instead one percentile over both directed distance sets
/// concatenated. Either mask empty gives NaN.
double hd95(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
            std::array<double, 3> spacing, Units units, bool pooled = false);

/// Average symmetric surface distance: all directed boundary distances summed
/// both ways, divided by the total boundary voxel count.
double assd(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
            std::array<double, 3> spacing, Units units);

/// Binarize each foreground tissue code and compute all three metrics.
SubjectScores evaluate_subject(const vol::LabelMap& pred,
                               const vol::LabelMap& gt, Units units,
                               const std::string& subject_id = "");

/// Assemble a report from per-subject scores, filling means, NaN-exclusion
/// counts and the average row.
MetricReport make_report(const std::string& pipeline, Units units,
                         std::vector<SubjectScores> subjects);

struct TTestResult {
  double t = 0.0;
  double p = 0.0;
  int df = 0;
  bool zero_variance = false;  ///< t and p are NaN when set
};

/// Two-tailed paired t-test over per-subject values (n-1 degrees of freedom).
TTestResult paired_ttest(const std::vector<double>& a,
                         const std::vector<double>& b);

/// Per-subject tissue-averaged DICE column, the default t-test input.
std::vector<double> subject_average_dice(const MetricReport& r);

/// One row per (subject, tissue) with full-precision values; means are
/// recomputed on load.
void write_report_csv(const MetricReport& r, const std::string& path);
MetricReport load_report_csv(const std::string& path);

/// Reference result table shipped with the repo for comparison display.
/// Values stay as printed in the source publication, units unstated there.
struct ReferenceRow {
  std::string tissue;
  std::string dice, hd95, assd;  ///< verbatim strings, parse as needed
};
struct ReferencePipeline {
  std::string name;
  std::vector<ReferenceRow> rows;
};
struct ReferenceTable {
  std::string units;
  std::vector<ReferencePipeline> pipelines;
};
ReferenceTable load_reference_table(const std::string& path);

/// Markdown tables in fixed tissue order, one column group per report.
/// With two or more reports a per-tissue delta table against the first
/// report is appended; a reference table adds a display-only section.
void write_report_markdown(const std::vector<MetricReport>& reports,
                           const std::string& path,
                           const ReferenceTable* reference = nullptr);

/// Fixed RGB legend per tissue code, index 0 unused (background untinted).
std::array<std::array<std::uint8_t, 3>, vol::kNumLabels> tissue_colors();

enum class Plane { axial, coronal, sagittal };

const char* plane_name(Plane p);

/// Blend the label colors over the grayscale mid-slice (or slice `index`
/// when >= 0) and write a PNG.
void write_overlay_png(const vol::Volume& intensity,
                       const vol::LabelMap& labels, Plane plane,
                       const std::string& path, int index = -1);

}  // namespace iseg::metrics
