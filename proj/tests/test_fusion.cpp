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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "iseg/fusion/fusion.hpp"
#include "iseg/phantom/phantom.hpp"
#include "iseg/vol/nifti.hpp"

using iseg::Dims3;
using iseg::i64;
namespace fusion = iseg::fusion;
namespace phantom = iseg::phantom;
namespace vol = iseg::vol;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const iseg::Error& e) {
    return e.what();
  }
  return "";
}

bool labels_equal(const vol::LabelMap& a, const vol::LabelMap& b) {
  return a.data.same_shape(b.data) &&
         std::memcmp(a.data.data(), b.data.data(),
                     size_t(a.data.size())) == 0;
}

vol::LabelMap cortical_only(const vol::LabelMap& lm) {
  vol::LabelMap out = lm;
  for (i64 i = 0; i < out.data.size(); ++i)
    if (out.data.data()[i] > 3) out.data.data()[i] = 0;
  return out;
}

phantom::CohortManifest fake_cohort(int n_train, int n_test) {
  phantom::CohortManifest m;
  m.dir = "/data/cohort";
  for (int i = 0; i < n_train; ++i)
    m.train_ids.push_back("s" + std::to_string(100 + i));
  for (int i = 0; i < n_test; ++i)
    m.test_ids.push_back("t" + std::to_string(100 + i));
  return m;
}

}  // namespace

TEST_CASE("code maps parse, validate and serialize") {
  const fusion::CodeMap def = fusion::default_code_map();
  CHECK(def == fusion::CodeMap{{1, 1}, {2, 2}, {3, 3}});
  CHECK(fusion::parse_code_map("1:CSF,2:GM,3:WM") == def);
  CHECK(fusion::parse_code_map("10:WM") == fusion::CodeMap{{10, 3}});

  CHECK(error_of([] { fusion::parse_code_map("4:Ventricle"); }) ==
        "code mapping must target CSF, GM or WM");
  CHECK(error_of([] { fusion::parse_code_map("0:CSF"); }) ==
        "code 0 is reserved for background");
  CHECK(error_of([] { fusion::parse_code_map(""); }) == "code map is empty");
  CHECK(error_of([] { fusion::parse_code_map("1:CSF,1:GM"); }) ==
        "duplicate external code 1");
  CHECK(error_of([] { fusion::parse_code_map("x:GM"); }) ==
        "bad code map entry (want code:Tissue): x:GM");
  CHECK(error_of([] { fusion::parse_code_map("2"); }) ==
        "bad code map entry (want code:Tissue): 2");
  CHECK(error_of([] { fusion::parse_code_map("2:Cortex"); }) ==
        "unknown tissue name: Cortex");

  const nlohmann::ordered_json j = fusion::code_map_to_json(def);
  CHECK(j.at("1") == "CSF");
  CHECK(j.at("2") == "GM");
  CHECK(j.at("3") == "WM");
}

TEST_CASE("three-tissue ingestion relabels and validates") {
  vol::LabelMap canonical(Dims3{6, 6, 6}, {1, 1, 1});
  vol::LabelMap permuted = canonical;
  for (i64 i = 0; i < canonical.data.size(); ++i) {
    const std::uint8_t code = std::uint8_t(i % 4);
    canonical.data.data()[i] = code;
    permuted.data.data()[i] = code == 0 ? 0 : std::uint8_t(code + 4);
  }

  // Ingesting an already-canonical map with the identity mapping is a
  // round trip.
  const fusion::ThreeTissueMap a =
      fusion::relabel_three_tissue(canonical, fusion::default_code_map());
  CHECK(labels_equal(a.map, canonical));

  // Permuted external codes with the matching mapping give the same map.
  const fusion::ThreeTissueMap b = fusion::relabel_three_tissue(
      permuted, fusion::parse_code_map("5:CSF,6:GM,7:WM"));
  CHECK(labels_equal(b.map, canonical));

  for (i64 i = 0; i < b.map.data.size(); ++i)
    CHECK(b.map.data.data()[i] <= 3);

  vol::LabelMap with4 = canonical;
  with4.at(0, 0, 0) = 4;
  CHECK(error_of([&] {
          fusion::relabel_three_tissue(with4, fusion::default_code_map());
        }) == "three-tissue map contains unmapped code 4");
}

TEST_CASE("three-tissue ingestion reads files and checks geometry") {
  vol::LabelMap lm(Dims3{5, 6, 7}, {1.0, 1.5, 2.0});
  lm.affine = vol::Mat4::scaling(1.0, 1.5, 2.0);
  for (i64 i = 0; i < lm.data.size(); ++i)
    lm.data.data()[i] = std::uint8_t(i % 4);

  const fs::path path = fs::temp_directory_path() / "iseg_three_tissue.nii.gz";
  vol::save_labels(lm, path.string());

  const fusion::ThreeTissueMap in = fusion::ingest_three_tissue(
      path.string(), fusion::default_code_map(), &lm);
  CHECK(labels_equal(in.map, lm));
  CHECK(in.source == path.string());

  const fusion::ThreeTissueMap tagged = fusion::ingest_three_tissue(
      path.string(), fusion::default_code_map(), &lm, "ibeat-v2");
  CHECK(tagged.source == "ibeat-v2");

  vol::LabelMap wrong_spacing = lm;
  wrong_spacing.spacing[0] += 0.01;
  CHECK(error_of([&] {
          fusion::ingest_three_tissue(path.string(),
                                      fusion::default_code_map(),
                                      &wrong_spacing);
        }) == "three-tissue geometry mismatch: spacing differs");

  vol::LabelMap wrong_affine = lm;
  wrong_affine.affine.at(0, 3) += 0.01;
  CHECK(error_of([&] {
          fusion::ingest_three_tissue(path.string(),
                                      fusion::default_code_map(),
                                      &wrong_affine);
        }) == "three-tissue geometry mismatch: affine differs");

  vol::LabelMap wrong_grid(Dims3{5, 6, 8}, lm.spacing);
  CHECK(error_of([&] {
          fusion::ingest_three_tissue(path.string(),
                                      fusion::default_code_map(),
                                      &wrong_grid);
        }) == "three-tissue geometry mismatch: grid differs");

  fs::remove(path);
}

TEST_CASE("fusion applies the precedence rules per voxel") {
  vol::LabelMap eight(Dims3{1, 1, 6}, {1, 1, 1});
  vol::LabelMap rawthree = eight;
  vol::LabelMap mask = eight;

  // Voxel layout: (0) deep vs WM, (1) GM vs WM, (2) WM vs background,
  // (3) background vs CSF, (4) GM vs WM outside the mask, (5) deep vs CSF.
  const std::uint8_t e[6] = {4, 2, 3, 0, 2, 7};
  const std::uint8_t t[6] = {3, 3, 0, 1, 3, 1};
  const std::uint8_t keep[6] = {1, 1, 1, 1, 0, 1};
  for (int x = 0; x < 6; ++x) {
    eight.at(x, 0, 0) = e[x];
    rawthree.at(x, 0, 0) = t[x];
    mask.at(x, 0, 0) = keep[x];
  }
  const fusion::ThreeTissueMap three =
      fusion::relabel_three_tissue(rawthree, fusion::default_code_map());

  const vol::LabelMap fused = fusion::fuse_labels(eight, three, mask);
  CHECK(fused.at(0, 0, 0) == 4);  // deep structure wins
  CHECK(fused.at(1, 0, 0) == 3);  // external cortical label wins
  CHECK(fused.at(2, 0, 0) == 3);  // empty external keeps the eight label
  CHECK(fused.at(3, 0, 0) == 1);
  CHECK(fused.at(4, 0, 0) == 0);  // outside the brain mask
  CHECK(fused.at(5, 0, 0) == 7);

  fusion::FusionRule overwrite;
  overwrite.deep_structures_win = false;
  const vol::LabelMap flat = fusion::fuse_labels(eight, three, mask,
                                                 overwrite);
  CHECK(flat.at(0, 0, 0) == 3);  // external label overwrites the ventricle
  CHECK(flat.at(5, 0, 0) == 1);

  vol::LabelMap bad_mask(Dims3{1, 1, 7}, {1, 1, 1});
  CHECK(error_of([&] { fusion::fuse_labels(eight, three, bad_mask); }) ==
        "fusion geometry mismatch: grid differs");

  CHECK(fusion::FusionRule::from_json(overwrite.to_json())
            .deep_structures_win == false);
}

TEST_CASE("fusion preserves deep structures and is idempotent") {
  phantom::PhantomConfig cfg;
  cfg.grid = 32;
  const phantom::PhantomSubject s = phantom::generate_subject(9, cfg);

  const vol::LabelMap& eight = s.labels_m6;
  vol::LabelMap mask = eight;
  for (i64 i = 0; i < mask.data.size(); ++i)
    mask.data.data()[i] = eight.data.data()[i] != 0;

  // An external map that swaps GM and WM everywhere disagrees with the
  // 8-tissue map at every cortical voxel of those two classes.
  const fusion::ThreeTissueMap three = fusion::relabel_three_tissue(
      cortical_only(eight), fusion::parse_code_map("1:CSF,2:WM,3:GM"),
      "gm-wm-swap");

  const vol::LabelMap fused = fusion::fuse_labels(eight, three, mask);

  i64 replaced = 0;
  for (i64 i = 0; i < fused.data.size(); ++i) {
    CHECK(fused.data.data()[i] < vol::kNumLabels);
    replaced += fused.data.data()[i] != eight.data.data()[i];
  }
  CHECK(replaced > 0);

  for (int code = 4; code < vol::kNumLabels; ++code) {
    for (i64 i = 0; i < fused.data.size(); ++i) {
      const bool in_eight = eight.data.data()[i] == code &&
                            mask.data.data()[i] != 0;
      const bool in_fused = fused.data.data()[i] == code;
      REQUIRE(in_eight == in_fused);
    }
  }

  fusion::ThreeTissueMap again;
  again.map = cortical_only(fused);
  again.source = "self";
  const vol::LabelMap fused2 = fusion::fuse_labels(fused, again, mask);
  CHECK(labels_equal(fused2, fused));

  const nlohmann::ordered_json prov = fusion::fusion_provenance(
      "p2_labels", three, fusion::FusionRule{}, fusion::default_code_map());
  CHECK(prov.at("sources").at("three") == "gm-wm-swap");
  CHECK(prov.at("rule").at("deep_structures_win") == true);
}

TEST_CASE("pseudo-label manifests cover the train split") {
  const phantom::CohortManifest cohort = fake_cohort(33, 10);
  std::map<std::string, std::string> fused;
  for (const std::string& id : cohort.train_ids)
    fused[id] = "/data/fused/" + id + "_fused.nii.gz";

  const fusion::PseudoManifest both = fusion::make_pseudo_labels(
      cohort, fused, fusion::PseudoVariant::both);
  CHECK(both.pairs.size() == 33);
  CHECK(both.in_channels == 2);
  CHECK(both.pairs[0].images.size() == 2);
  CHECK(both.pairs[0].images[0] == "/data/cohort/s100/m6_T1.nii.gz");
  CHECK(both.pairs[0].images[1] == "/data/cohort/s100/m6_T2.nii.gz");
  CHECK(both.pairs[0].target == "/data/fused/s100_fused.nii.gz");

  const fusion::PseudoManifest t1 =
      fusion::make_pseudo_labels(cohort, fused, fusion::PseudoVariant::t1);
  const fusion::PseudoManifest t2 =
      fusion::make_pseudo_labels(cohort, fused, fusion::PseudoVariant::t2);
  CHECK(t1.in_channels == 1);
  CHECK(t2.in_channels == 1);
  for (size_t i = 0; i < t1.pairs.size(); ++i) {
    CHECK(t1.pairs[i].images.size() == 1);
    CHECK(t1.pairs[i].images[0] ==
          "/data/cohort/" + t1.pairs[i].subject_id + "/m6_T1.nii.gz");
    CHECK(t2.pairs[i].images[0] ==
          "/data/cohort/" + t2.pairs[i].subject_id + "/m6_T2.nii.gz");
    CHECK(t1.pairs[i].subject_id == t2.pairs[i].subject_id);
    CHECK(t1.pairs[i].target == t2.pairs[i].target);
  }

  std::map<std::string, std::string> incomplete = fused;
  incomplete.erase("s115");
  CHECK(error_of([&] {
          fusion::make_pseudo_labels(cohort, incomplete,
                                     fusion::PseudoVariant::both);
        }) == "missing fused map for train subject s115");

  const fusion::PseudoManifest round =
      fusion::PseudoManifest::from_json(both.to_json());
  CHECK(round.variant == both.variant);
  CHECK(round.in_channels == both.in_channels);
  REQUIRE(round.pairs.size() == both.pairs.size());
  for (size_t i = 0; i < round.pairs.size(); ++i) {
    CHECK(round.pairs[i].subject_id == both.pairs[i].subject_id);
    CHECK(round.pairs[i].images == both.pairs[i].images);
    CHECK(round.pairs[i].target == both.pairs[i].target);
  }

  CHECK(fusion::pseudo_variant_from_name("T1") == fusion::PseudoVariant::t1);
  CHECK(std::string(fusion::pseudo_variant_name(fusion::PseudoVariant::both)) ==
        "both");
  CHECK(error_of([] { fusion::pseudo_variant_from_name("t3"); }) ==
        "unknown pseudo-label variant: t3");
}
