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

#include "iseg/fusion/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "iseg/vol/nifti.hpp"

namespace iseg::fusion {

using vol::LabelMap;
using vol::Tissue;

CodeMap default_code_map() {
  return CodeMap{{1, int(Tissue::csf)}, {2, int(Tissue::gm)},
                 {3, int(Tissue::wm)}};
}

CodeMap parse_code_map(const std::string& text) {
  CodeMap mapping;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t comma = std::min(text.find(',', pos), text.size());
    const std::string entry = text.substr(pos, comma - pos);
    const size_t colon = entry.find(':');
    require(colon != std::string::npos,
            "bad code map entry (want code:Tissue): " + entry);
    int code = 0;
    try {
      size_t used = 0;
      code = std::stoi(entry.substr(0, colon), &used);
      require(used == colon, "x");
    } catch (const std::exception&) {
      fail("bad code map entry (want code:Tissue): " + entry);
    }
    require(mapping.find(code) == mapping.end(),
            "duplicate external code " + std::to_string(code));
    mapping[code] = vol::tissue_from_name(entry.substr(colon + 1));
    pos = comma + 1;
  }
  validate_code_map(mapping);
  return mapping;
}

void validate_code_map(const CodeMap& mapping) {
  require(!mapping.empty(), "code map is empty");
  for (const auto& [code, tissue] : mapping) {
    require(code > 0, "code 0 is reserved for background");
    require(tissue == int(Tissue::csf) || tissue == int(Tissue::gm) ||
                tissue == int(Tissue::wm),
            "code mapping must target CSF, GM or WM");
  }
}

nlohmann::ordered_json code_map_to_json(const CodeMap& mapping) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [code, tissue] : mapping)
    j[std::to_string(code)] = vol::tissue_name(tissue);
  return j;
}

ThreeTissueMap relabel_three_tissue(const vol::LabelMap& raw,
                                    const CodeMap& mapping,
                                    const std::string& source) {
  validate_code_map(mapping);
  ThreeTissueMap out;
  out.source = source;
  out.map = raw;
  for (i64 i = 0; i < raw.data.size(); ++i) {
    const int code = raw.data.data()[i];
    if (code == 0) continue;
    const auto it = mapping.find(code);
    if (it == mapping.end())
      fail("three-tissue map contains unmapped code " + std::to_string(code));
    out.map.data.data()[i] = std::uint8_t(it->second);
  }
  return out;
}

namespace {

void check_geometry(const LabelMap& a, const LabelMap& b,
                    const std::string& what) {
  require(a.data.dims() == b.data.dims(), what + ": grid differs");
  for (int i = 0; i < 3; ++i)
    require(std::fabs(a.spacing[size_t(i)] - b.spacing[size_t(i)]) <= 1e-4,
            what + ": spacing differs");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      require(std::fabs(a.affine.at(r, c) - b.affine.at(r, c)) <= 1e-4,
              what + ": affine differs");
}

bool is_deep(int code) {
  return code >= int(Tissue::ventricle) &&
         code <= int(Tissue::hippocampus_amygdala);
}

bool is_cortical(int code) {
  return code == int(Tissue::csf) || code == int(Tissue::gm) ||
         code == int(Tissue::wm);
}

}  // namespace

ThreeTissueMap ingest_three_tissue(const std::string& path,
                                   const CodeMap& mapping,
                                   const vol::LabelMap* reference,
                                   const std::string& source) {
  const LabelMap raw = vol::load_labels(path);
  if (reference != nullptr)
    check_geometry(raw, *reference, "three-tissue geometry mismatch");
  return relabel_three_tissue(raw, mapping,
                              source.empty() ? path : source);
}

vol::LabelMap fuse_labels(const vol::LabelMap& eight,
                          const ThreeTissueMap& three,
                          const vol::LabelMap& brain_mask,
                          const FusionRule& rule) {
  check_geometry(three.map, eight, "fusion geometry mismatch");
  check_geometry(brain_mask, eight, "fusion geometry mismatch");

  LabelMap out = eight;
  for (i64 i = 0; i < out.data.size(); ++i) {
    if (brain_mask.data.data()[i] == 0) {
      out.data.data()[i] = 0;
      continue;
    }
    const int e = eight.data.data()[i];
    const int t = three.map.data.data()[i];
    require(e < vol::kNumLabels, "fusion: label code out of range");
    if (rule.deep_structures_win && is_deep(e)) continue;
    if (is_cortical(t)) out.data.data()[i] = std::uint8_t(t);
  }
  return out;
}

nlohmann::ordered_json FusionRule::to_json() const {
  return nlohmann::ordered_json{{"deep_structures_win", deep_structures_win}};
}

FusionRule FusionRule::from_json(const nlohmann::json& j) {
  FusionRule r;
  r.deep_structures_win = j.value("deep_structures_win", true);
  return r;
}

nlohmann::ordered_json fusion_provenance(const std::string& eight_source,
                                         const ThreeTissueMap& three,
                                         const FusionRule& rule,
                                         const CodeMap& mapping) {
  return nlohmann::ordered_json{
      {"sources",
       nlohmann::ordered_json{{"eight", eight_source},
                              {"three", three.source}}},
      {"rule", rule.to_json()},
      {"code_map", code_map_to_json(mapping)}};
}

const char* pseudo_variant_name(PseudoVariant v) {
  switch (v) {
    case PseudoVariant::t1:
      return "T1";
    case PseudoVariant::t2:
      return "T2";
    case PseudoVariant::both:
      return "both";
  }
  fail("bad pseudo variant");
}

PseudoVariant pseudo_variant_from_name(const std::string& name) {
  if (name == "T1") return PseudoVariant::t1;
  if (name == "T2") return PseudoVariant::t2;
  if (name == "both") return PseudoVariant::both;
  fail("unknown pseudo-label variant: " + name);
}

nlohmann::ordered_json PseudoManifest::to_json() const {
  nlohmann::ordered_json jp = nlohmann::ordered_json::array();
  for (const PseudoPair& p : pairs)
    jp.push_back(nlohmann::ordered_json{{"subject_id", p.subject_id},
                                        {"images", p.images},
                                        {"target", p.target}});
  return nlohmann::ordered_json{{"variant", pseudo_variant_name(variant)},
                                {"in_channels", in_channels},
                                {"pairs", jp}};
}

PseudoManifest PseudoManifest::from_json(const nlohmann::json& j) {
  PseudoManifest m;
  m.variant = pseudo_variant_from_name(j.at("variant").get<std::string>());
  m.in_channels = j.at("in_channels").get<int>();
  for (const auto& p : j.at("pairs")) {
    PseudoPair pair;
    pair.subject_id = p.at("subject_id").get<std::string>();
    pair.images = p.at("images").get<std::vector<std::string>>();
    pair.target = p.at("target").get<std::string>();
    m.pairs.push_back(std::move(pair));
  }
  return m;
}

PseudoManifest make_pseudo_labels(
    const phantom::CohortManifest& cohort,
    const std::map<std::string, std::string>& fused_paths,
    PseudoVariant variant) {
  PseudoManifest m;
  m.variant = variant;
  m.in_channels = variant == PseudoVariant::both ? 2 : 1;
  for (const std::string& id : cohort.train_ids) {
    const auto it = fused_paths.find(id);
    if (it == fused_paths.end())
      fail("missing fused map for train subject " + id);
    PseudoPair p;
    p.subject_id = id;
    const std::string dir = cohort.subject_dir(id);
    if (variant != PseudoVariant::t2)
      p.images.push_back(dir + "/m6_T1.nii.gz");
    if (variant != PseudoVariant::t1)
      p.images.push_back(dir + "/m6_T2.nii.gz");
    p.target = it->second;
    m.pairs.push_back(std::move(p));
  }
  return m;
}

}  // namespace iseg::fusion
