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

#include <map>
#include <string>
#include <vector>

#include "iseg/phantom/phantom.hpp"
#include "iseg/vol/volume.hpp"
#include "json.hpp"

// Adapter for external 3-tissue segmentations and the label-replacement
// rule that merges them into an 8-tissue map: cortical WM/GM/CSF come from
// the external tool, the five deep structures keep the in-house labels.
namespace iseg::fusion {

/// External label code to canonical tissue code. Targets must be CSF, GM
/// or WM; code 0 stays background and may not be remapped.
using CodeMap = std::map<int, int>;

CodeMap default_code_map();

/// Parses "1:CSF,2:GM,3:WM". Keys are external integer codes, values are
/// canonical tissue names.
CodeMap parse_code_map(const std::string& text);

void validate_code_map(const CodeMap& mapping);

nlohmann::ordered_json code_map_to_json(const CodeMap& mapping);

struct ThreeTissueMap {
  vol::LabelMap map;   // holds only background, CSF, GM, WM after ingestion
  std::string source;  // provenance tag, e.g. the external tool name
};

/// Relabels raw external codes to canonical ones. Every nonzero code in
/// `raw` must appear in `mapping`.
ThreeTissueMap relabel_three_tissue(const vol::LabelMap& raw,
                                    const CodeMap& mapping,
                                    const std::string& source = "");

/// Loads a 3-tissue NIfTI file and relabels it. When `reference` is given,
/// the grids must match and spacing/affine must agree within 1e-4.
ThreeTissueMap ingest_three_tissue(const std::string& path,
                                   const CodeMap& mapping,
                                   const vol::LabelMap* reference = nullptr,
                                   const std::string& source = "");

struct FusionRule {
  // With the default, a deep-structure label in the 8-tissue map survives
  // even where the external map disagrees; disabling it lets the external
  // WM/GM/CSF overwrite everything inside the brain mask.
  bool deep_structures_win = true;

  nlohmann::ordered_json to_json() const;
  static FusionRule from_json(const nlohmann::json& j);
};

/// Per-voxel merge inside the brain mask: deep structures keep the
/// 8-tissue label (under the default rule), otherwise a nonzero external
/// label wins, otherwise the 8-tissue label stays. Everything outside the
/// mask becomes background.
vol::LabelMap fuse_labels(const vol::LabelMap& eight,
                          const ThreeTissueMap& three,
                          const vol::LabelMap& brain_mask,
                          const FusionRule& rule = {});

/// Provenance block written beside each fused output.
nlohmann::ordered_json fusion_provenance(const std::string& eight_source,
                                         const ThreeTissueMap& three,
                                         const FusionRule& rule,
                                         const CodeMap& mapping);

enum class PseudoVariant { t1, t2, both };

const char* pseudo_variant_name(PseudoVariant v);
PseudoVariant pseudo_variant_from_name(const std::string& name);

struct PseudoPair {
  std::string subject_id;
  std::vector<std::string> images;  // one or two paths, variant order T1, T2
  std::string target;               // fused pseudo-label path
};

struct PseudoManifest {
  PseudoVariant variant = PseudoVariant::both;
  int in_channels = 2;
  std::vector<PseudoPair> pairs;

  nlohmann::ordered_json to_json() const;
  static PseudoManifest from_json(const nlohmann::json& j);
};

/// Pairs every training subject's real 6-month image(s) with its fused map
/// as the self-training target. `fused_paths` maps subject id to the fused
/// label file.
PseudoManifest make_pseudo_labels(
    const phantom::CohortManifest& cohort,
    const std::map<std::string, std::string>& fused_paths,
    PseudoVariant variant);

}  // namespace iseg::fusion
