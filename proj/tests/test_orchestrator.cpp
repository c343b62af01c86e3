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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "iseg/nets/bundle.hpp"
#include "iseg/orchestrator/orchestrator.hpp"
#include "iseg/vol/nifti.hpp"

namespace fs = std::filesystem;
using namespace iseg;

namespace {

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<nlohmann::json> read_log(const std::string& path) {
  std::ifstream in(path);
  std::vector<nlohmann::json> records;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) records.push_back(nlohmann::json::parse(line));
  return records;
}

/// Small networks that still exercise every architectural piece at a
/// 32-voxel grid: two segmenter levels, two generator levels, a two-layer
/// discriminator and a two-level registration net.
orch::ExperimentConfig tiny_cfg() {
  orch::ExperimentConfig c;
  c.seed = 11;
  c.epochs = 2;
  c.segmenter.filters = {4, 6};
  c.segmenter.lr = 0.003;
  c.gan.gen_filters = {3, 4};
  c.gan.disc_filters = {3, 1};
  c.regnet.filters = {4, 4};
  return c;
}

struct Fix {
  fs::path root;
  phantom::CohortManifest cohort;
  orch::ExperimentConfig base;
};

const Fix& fx() {
  static const Fix f = [] {
    Fix g;
    g.root = fs::temp_directory_path() / "iseg_orch_fix";
    fs::remove_all(g.root);
    fs::create_directories(g.root);
    phantom::PhantomConfig pc;
    pc.grid = 32;
    g.cohort =
        phantom::generate_cohort((g.root / "cohort").string(), 4, 501, pc,
                                 0.75);
    g.base = tiny_cfg();
    g.base.runs_root = (g.root / "runs").string();
    g.base.cohort = (g.root / "cohort").string();
    return g;
  }();
  return f;
}

/// One completed two-epoch P2 run shared by the P3/P4/P5 cases.
const orch::TrainResult& p2fx() {
  static const orch::TrainResult r = [] {
    orch::ExperimentConfig c = fx().base;
    c.run_name = "gan";
    c.pipeline = orch::PipelineId::p2;
    return orch::train_p2(fx().cohort, c);
  }();
  return r;
}

/// One completed three-epoch P1 run shared by the inference cases.
const orch::TrainResult& p1fx() {
  static const orch::TrainResult r = [] {
    orch::ExperimentConfig c = fx().base;
    c.run_name = "p1base";
    c.epochs = 3;
    return orch::train_p1(fx().cohort, c);
  }();
  return r;
}

/// Ground-truth three-tissue maps for every subject: the cortical part of
/// the 6-month labels with deep structures dropped, stored under the
/// canonical 1/2/3 codes.
std::string write_three_tissue_dir(const std::string& name,
                                   const std::vector<std::string>& skip = {}) {
  const fs::path dir = fx().root / name;
  fs::create_directories(dir);
  for (const std::string& id : fx().cohort.all_ids()) {
    bool skipped = false;
    for (const std::string& s : skip) skipped = skipped || s == id;
    if (skipped) continue;
    vol::LabelMap lm = vol::load_labels(fx().cohort.subject_dir(id) +
                                        "/labels_m6.nii.gz");
    std::uint8_t* p = lm.data.data();
    for (i64 i = 0; i < lm.data.size(); ++i)
      if (p[i] > 3) p[i] = 0;
    vol::save_labels(lm, (dir / (id + ".nii.gz")).string());
  }
  return dir.string();
}

}  // namespace

TEST_CASE("pipeline names and experiment config json") {
  CHECK(std::string(orch::pipeline_name(orch::PipelineId::p1)) == "P1_AUNet");
  CHECK(std::string(orch::pipeline_name(orch::PipelineId::p4)) ==
        "P4_Cyc_AUNet_iBEAT");
  for (int i = 0; i < 5; ++i) {
    const auto id = orch::PipelineId(i);
    CHECK(orch::pipeline_from_name(orch::pipeline_name(id)) == id);
  }
  CHECK(contains(error_of([] { orch::pipeline_from_name("P9_Magic"); }),
                 "unknown pipeline"));

  orch::ExperimentConfig c = tiny_cfg();
  c.run_name = "roundtrip";
  c.cohort = "somewhere";
  c.pipeline = orch::PipelineId::p3;
  c.variant = fusion::PseudoVariant::t1;
  c.weights.lambda_smooth = 0.35;
  c.fresh_segmenter = true;
  const auto j = c.to_json();
  const orch::ExperimentConfig d = orch::ExperimentConfig::from_json(j);
  CHECK(d.to_json() == j);
  CHECK(d.pipeline == orch::PipelineId::p3);
  CHECK(d.variant == fusion::PseudoVariant::t1);
  CHECK(d.weights.lambda_smooth == doctest::Approx(0.35));
  CHECK(d.fresh_segmenter);

  SUBCASE("unknown keys are rejected, not defaulted") {
    nlohmann::json bad = j;
    bad["epocs"] = 7;
    CHECK(contains(error_of([&] { orch::ExperimentConfig::from_json(bad); }),
                   "unknown config key: experiment.epocs"));
    nlohmann::json nested = j;
    nested["segmenter"]["flters"] = {8, 8};
    CHECK(
        contains(error_of([&] { orch::ExperimentConfig::from_json(nested); }),
                 "unknown config key: segmenter.flters"));
  }

  SUBCASE("validation catches bad fields") {
    orch::ExperimentConfig bad = tiny_cfg();
    bad.epochs = 0;
    CHECK(contains(error_of([&] { bad.validate(); }), "epochs"));
    bad = tiny_cfg();
    bad.run_name = "a/b";
    CHECK(contains(error_of([&] { bad.validate(); }), "run_name"));
    bad = tiny_cfg();
    bad.mask_source = "brainz";
    CHECK(contains(error_of([&] { bad.validate(); }), "mask_source"));
    bad = tiny_cfg();
    bad.code_map = "0:CSF";
    CHECK(contains(error_of([&] { bad.validate(); }), "code 0"));
  }
}

TEST_CASE("model space normalization and label masks") {
  const auto s = phantom::generate_subject(3, [] {
    phantom::PhantomConfig pc;
    pc.grid = 32;
    return pc;
  }());
  const vol::LabelMap mask = orch::mask_from_labels(s.labels_m6);
  const std::uint8_t* mp = mask.data.data();
  for (i64 i = 0; i < mask.data.size(); ++i) CHECK(mp[i] <= 1);

  const vol::Volume m = orch::to_model_space(s.m6_t2, mask);
  const float* p = m.data.data();
  double mean = 0.0;
  i64 n = 0;
  float lo = 1e9f, hi = -1e9f;
  for (i64 i = 0; i < m.data.size(); ++i) {
    if (mp[i] != 0) {
      mean += p[i];
      ++n;
      lo = std::min(lo, p[i]);
      hi = std::max(hi, p[i]);
    } else {
      CHECK(p[i] == 0.0f);
    }
  }
  mean /= double(n);
  CHECK(std::fabs(mean) < 0.02);
  CHECK(lo >= -1.0f);
  CHECK(hi <= 1.0f);
  // The phantom contrast span divided by four standard deviations should
  // comfortably exercise a good part of the band.
  CHECK(hi - lo > 0.5f);
}

TEST_CASE("folding fraction flags nonpositive jacobians") {
  const Dims3 d{8, 8, 8};
  TensorF zero(3, d);
  CHECK(orch::folding_fraction(zero) == 0.0);

  // u_x = -2x turns the x axis inside out everywhere.
  TensorF fold(3, d);
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x)
        fold.at(0, z, y, x) = -2.0f * float(x);
  CHECK(orch::folding_fraction(fold) == doctest::Approx(1.0));

  // A gentle smooth field stays diffeomorphic.
  TensorF gentle(3, d);
  for (int c = 0; c < 3; ++c)
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x)
          gentle.at(c, z, y, x) =
              0.2f * std::sin(0.7f * float(x + y + z + c));
  CHECK(orch::folding_fraction(gentle) == 0.0);

  TensorF one(1, d);
  CHECK(contains(error_of([&] { orch::folding_fraction(one); }),
                 "three channels"));
}

TEST_CASE("p1 training checkpoints, determinism, resume and clobber rules") {
  orch::ExperimentConfig a = fx().base;
  a.run_name = "a";
  a.epochs = 4;
  const orch::TrainResult ra = orch::train_p1(fx().cohort, a);
  CHECK(ra.epochs == 4);
  CHECK_FALSE(ra.resumed);
  CHECK(fs::exists(ra.dir + "/config.json"));
  CHECK(fs::exists(ra.dir + "/segmenter.bundle"));
  CHECK(fs::exists(ra.dir + "/done.json"));

  const auto log = read_log(ra.dir + "/log.ndjson");
  REQUIRE(log.size() == 4);
  CHECK(log[0]["epoch"] == 0);
  CHECK(log[3]["epoch"] == 3);
  // Twelve optimizer steps on a toy net must already reduce the loss.
  CHECK(log[3]["seg"].get<double>() < log[0]["seg"].get<double>());

  const auto info = nets::peek_bundle(ra.dir + "/segmenter.bundle");
  CHECK(info.kind == "segmenter");
  CHECK(info.stage == "p1");
  CHECK(info.has_opt_state);

  SUBCASE("same config in a fresh run reproduces the bundle bit for bit") {
    orch::ExperimentConfig b = a;
    b.run_name = "b";
    const orch::TrainResult rb = orch::train_p1(fx().cohort, b);
    CHECK(read_bytes(rb.dir + "/segmenter.bundle") ==
          read_bytes(ra.dir + "/segmenter.bundle"));
    CHECK(rb.last == ra.last);
  }

  SUBCASE("interrupting after two epochs and extending matches a full run") {
    orch::ExperimentConfig c = a;
    c.run_name = "c";
    c.epochs = 2;
    orch::train_p1(fx().cohort, c);
    c.epochs = 4;
    const orch::TrainResult rc = orch::train_p1(fx().cohort, c);
    CHECK(rc.resumed);
    CHECK(read_bytes(rc.dir + "/segmenter.bundle") ==
          read_bytes(ra.dir + "/segmenter.bundle"));
    CHECK(rc.last == ra.last);
  }

  SUBCASE("a completed stage refuses to rerun without overwrite") {
    CHECK(contains(error_of([&] { orch::train_p1(fx().cohort, a); }),
                   "already complete"));
    orch::ExperimentConfig shorter = a;
    shorter.epochs = 3;
    CHECK(contains(error_of([&] { orch::train_p1(fx().cohort, shorter); }),
                   "already complete"));
    orch::ExperimentConfig redo = a;
    redo.run_name = "redo";
    redo.epochs = 1;
    orch::train_p1(fx().cohort, redo);
    redo.overwrite = true;
    const orch::TrainResult rr = orch::train_p1(fx().cohort, redo);
    CHECK_FALSE(rr.resumed);
    CHECK(read_log(rr.dir + "/log.ndjson").size() == 1);
  }

  SUBCASE("a resumed run may not change hyperparameters silently") {
    orch::ExperimentConfig d = a;
    d.run_name = "mismatch";
    d.epochs = 1;
    orch::train_p1(fx().cohort, d);
    d.epochs = 2;
    d.seed = 999;
    CHECK(contains(error_of([&] { orch::train_p1(fx().cohort, d); }),
                   "differs from the request"));
  }
}

TEST_CASE("non-finite training aborts without clobbering the checkpoint") {
  orch::ExperimentConfig c = fx().base;
  c.run_name = "dv";
  c.epochs = 1;
  const orch::TrainResult r = orch::train_p1(fx().cohort, c);

  // Corrupt the optimizer payload with NaNs, as a crashed writer or bad
  // disk would. The resumed epoch turns the weights non-finite, which
  // must surface as a divergence abort that leaves the file untouched
  // rather than checkpointing garbage over it.
  const std::string bpath = r.dir + "/segmenter.bundle";
  std::string bytes = read_bytes(bpath);
  REQUIRE(bytes.size() > 8192);
  const std::uint32_t nan_bits = 0x7FC00000u;
  for (std::size_t off = bytes.size() - 4096; off + 4 <= bytes.size() - 1024;
       off += 4)
    std::memcpy(bytes.data() + off, &nan_bits, 4);
  {
    std::ofstream out(bpath, std::ios::binary | std::ios::trunc);
    out << bytes;
  }

  c.epochs = 3;
  const std::string err =
      error_of([&] { orch::train_p1(fx().cohort, c); });
  CHECK(contains(err, "diverged"));
  CHECK(read_bytes(bpath) == bytes);
  CHECK_FALSE(fs::exists(r.dir + "/done.json"));
}

TEST_CASE("p2 joint training writes five bundles and component logs") {
  const orch::TrainResult& r = p2fx();
  CHECK(fs::exists(r.dir + "/gen_ab.bundle"));
  CHECK(fs::exists(r.dir + "/gen_ba.bundle"));
  CHECK(fs::exists(r.dir + "/disc_a.bundle"));
  CHECK(fs::exists(r.dir + "/disc_b.bundle"));
  CHECK(fs::exists(r.dir + "/segmenter.bundle"));
  CHECK(nets::peek_bundle(r.dir + "/gen_ab.bundle").kind == "generator");
  CHECK(nets::peek_bundle(r.dir + "/disc_b.bundle").kind == "discriminator");

  const auto log = read_log(r.dir + "/log.ndjson");
  std::size_t epochs_logged = 0;
  for (const auto& rec : log)
    if (!rec.contains("warning")) ++epochs_logged;
  CHECK(epochs_logged == 2);
  for (const char* key : {"adv_ab", "adv_ba", "cycle_a", "cycle_b", "ident_a",
                          "ident_b", "seg", "gen_total", "d_a", "d_b"}) {
    REQUIRE(log[0].contains(key));
    CHECK(std::isfinite(log[0][key].get<double>()));
  }
}

TEST_CASE("p2 resume equivalence and a frozen segmenter at zero seg weight") {
  orch::ExperimentConfig c = fx().base;
  c.pipeline = orch::PipelineId::p2;
  c.run_name = "gan2";
  c.epochs = 1;
  orch::train_p2(fx().cohort, c);
  c.epochs = 2;
  const orch::TrainResult r = orch::train_p2(fx().cohort, c);
  CHECK(r.resumed);
  CHECK(read_bytes(r.dir + "/gen_ab.bundle") ==
        read_bytes(p2fx().dir + "/gen_ab.bundle"));
  CHECK(read_bytes(r.dir + "/segmenter.bundle") ==
        read_bytes(p2fx().dir + "/segmenter.bundle"));

  // With the segmentation term switched off the segmenter must never
  // move. Two runs that differ in an unrelated weight agree bit for bit
  // on the segmenter while their generators train apart.
  orch::ExperimentConfig za = fx().base;
  za.pipeline = orch::PipelineId::p2;
  za.run_name = "ls0a";
  za.epochs = 1;
  za.weights.lambda_seg = 0.0;
  const orch::TrainResult ra = orch::train_p2(fx().cohort, za);
  orch::ExperimentConfig zb = za;
  zb.run_name = "ls0b";
  zb.weights.lambda_cycle = 7.0;
  const orch::TrainResult rb = orch::train_p2(fx().cohort, zb);
  CHECK(read_bytes(ra.dir + "/segmenter.bundle") ==
        read_bytes(rb.dir + "/segmenter.bundle"));
  CHECK(read_bytes(ra.dir + "/gen_ab.bundle") !=
        read_bytes(rb.dir + "/gen_ab.bundle"));
  CHECK(nets::peek_bundle(ra.dir + "/segmenter.bundle").step_count == 0);
}

TEST_CASE("p3 requires p2 artifacts and trains registration") {
  orch::ExperimentConfig nop2 = fx().base;
  nop2.pipeline = orch::PipelineId::p3;
  nop2.run_name = "orphan";
  CHECK(contains(error_of([&] { orch::train_p3(fx().cohort, nop2); }),
                 "requires a completed 'p2' stage"));

  orch::ExperimentConfig c = fx().base;
  c.pipeline = orch::PipelineId::p3;
  c.run_name = "gan";  // next to the completed p2 stage
  c.epochs = 2;
  (void)p2fx();
  const orch::TrainResult r = orch::train_p3(fx().cohort, c);
  CHECK(fs::exists(r.dir + "/regnet.bundle"));
  CHECK(fs::exists(r.dir + "/segmenter.bundle"));
  CHECK(nets::peek_bundle(r.dir + "/regnet.bundle").kind == "regnet");

  const auto log = read_log(r.dir + "/log.ndjson");
  REQUIRE(!log.empty());
  for (const char* key :
       {"similarity", "smooth", "reg_total", "fold_fraction", "seg"}) {
    REQUIRE(log[0].contains(key));
    CHECK(std::isfinite(log[0][key].get<double>()));
  }
  // A freshly initialized registration net stays far away from folding.
  CHECK(r.last["fold_fraction"].get<double>() < 0.2);
}

TEST_CASE("smoothness sweep runs one stage per weight and writes tables") {
  (void)p2fx();
  orch::ExperimentConfig c = fx().base;
  c.pipeline = orch::PipelineId::p3;
  c.run_name = "gan";
  c.epochs = 1;
  const auto rows = orch::sweep_p3(fx().cohort, c, {0.2, 0.8});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].lambda == doctest::Approx(0.2));
  CHECK(rows[1].lambda == doctest::Approx(0.8));
  CHECK(rows[0].dir != rows[1].dir);
  CHECK(contains(rows[0].dir, "p3_lambda_0.2"));
  for (const auto& row : rows) {
    CHECK(fs::exists(row.dir + "/done.json"));
    CHECK(std::isfinite(row.similarity));
  }
  const std::string base = c.runs_root + "/" + c.run_name;
  CHECK(fs::exists(base + "/sweep.csv"));
  CHECK(fs::exists(base + "/sweep.md"));
  const std::string csv = read_bytes(base + "/sweep.csv");
  CHECK(contains(csv, "lambda,similarity,smooth,total,fold_fraction,dir"));
  CHECK(contains(read_bytes(base + "/sweep.md"), "| 0.8 |"));
}

TEST_CASE("p4 fuses inferred labels with external three-tissue maps") {
  (void)p2fx();
  orch::ExperimentConfig c = fx().base;
  c.pipeline = orch::PipelineId::p4;
  c.run_name = "gan";
  c.three_tissue_dir = write_three_tissue_dir("three_full");
  const orch::P4Result r = orch::run_p4(fx().cohort, c);
  CHECK(r.failures.empty());
  CHECK(r.fused.size() == fx().cohort.all_ids().size());

  const std::string id = fx().cohort.test_ids.at(0);
  REQUIRE(fs::exists(r.fused.at(id)));
  const auto prov = nlohmann::json::parse(
      read_bytes(r.dir + "/" + id + "_fused.json"));
  CHECK(prov.contains("code_map"));
  CHECK(prov["subject_id"] == id);
  CHECK(contains(prov["sources"]["eight"].get<std::string>(), "segmenter"));

  // Deep structures in the fused map must be exactly the p2 segmenter's
  // deep predictions, voxel for voxel.
  const std::string sdir = fx().cohort.subject_dir(id);
  const vol::Volume m6 = vol::load_volume(sdir + "/m6_T2.nii.gz");
  const vol::LabelMap mask = orch::mask_from_labels(
      vol::load_labels(sdir + "/labels_m6.nii.gz"));
  const vol::LabelMap eight =
      orch::infer_bundle(p2fx().dir + "/segmenter.bundle", {&m6}, mask);
  const vol::LabelMap fused = vol::load_labels(r.fused.at(id));
  for (i64 i = 0; i < fused.data.size(); ++i) {
    for (std::uint8_t code = 4; code <= 8; ++code) {
      const bool in_fused = fused.data.data()[i] == code;
      const bool in_eight =
          eight.data.data()[i] == code && mask.data.data()[i] != 0;
      REQUIRE(in_fused == in_eight);
    }
  }

  SUBCASE("a finished p4 stage refuses to rerun") {
    CHECK(contains(error_of([&] { orch::run_p4(fx().cohort, c); }),
                   "already complete"));
  }

  SUBCASE("a missing subject map is recorded and the batch continues") {
    const std::string miss = fx().cohort.train_ids.at(0);
    orch::ExperimentConfig m = c;
    m.run_name = "ganmiss";
    m.three_tissue_dir = write_three_tissue_dir("three_miss", {miss});
    fs::create_directories(orch::stage_dir(m, "p2"));
    fs::copy(orch::stage_dir(c, "p2"), orch::stage_dir(m, "p2"),
             fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    const orch::P4Result rm = orch::run_p4(fx().cohort, m);
    REQUIRE(rm.failures.size() == 1);
    CHECK(contains(rm.failures[0], miss));
    CHECK(rm.fused.size() == fx().cohort.all_ids().size() - 1);
    CHECK(fs::exists(rm.dir + "/done.json"));
  }
}

TEST_CASE("p5 trains a fresh segmenter on fused pseudo labels") {
  orch::ExperimentConfig orphan = fx().base;
  orphan.pipeline = orch::PipelineId::p5;
  orphan.run_name = "orphan5";
  CHECK(contains(error_of([&] { orch::train_p5(fx().cohort, orphan); }),
                 "requires a completed 'p4' stage"));

  orch::ExperimentConfig c = fx().base;
  c.pipeline = orch::PipelineId::p5;
  c.run_name = "gan";  // p4 ran here in the previous case
  c.epochs = 1;
  c.variant = fusion::PseudoVariant::both;
  CHECK(contains(error_of([&] { orch::train_p5(fx().cohort, c); }),
                 "2 input channel(s)"));

  c.variant = fusion::PseudoVariant::t2;
  const orch::TrainResult r = orch::train_p5(fx().cohort, c);
  CHECK(contains(r.dir, "p5_T2"));
  const auto info = nets::peek_bundle(r.dir + "/segmenter.bundle");
  CHECK(info.kind == "segmenter");
  CHECK(info.stage == "p5_T2");
  CHECK(std::isfinite(r.last["seg"].get<double>()));
}

TEST_CASE("inference restricts labels to the mask and validates inputs") {
  const std::string bundle = p1fx().dir + "/segmenter.bundle";
  const std::string id = fx().cohort.test_ids.at(0);
  const std::string sdir = fx().cohort.subject_dir(id);
  const vol::Volume neo = vol::load_volume(sdir + "/neo_T2.nii.gz");
  const vol::LabelMap mask = orch::mask_from_labels(
      vol::load_labels(sdir + "/labels_neo.nii.gz"));

  const vol::LabelMap once = orch::infer_bundle(bundle, {&neo}, mask);
  const vol::LabelMap twice = orch::infer_bundle(bundle, {&neo}, mask);
  CHECK(std::memcmp(once.data.data(), twice.data.data(),
                    std::size_t(once.data.size())) == 0);

  i64 inside = 0;
  for (i64 i = 0; i < once.data.size(); ++i) {
    const std::uint8_t v = once.data.data()[i];
    CHECK(v < vol::kNumLabels);
    if (mask.data.data()[i] == 0)
      CHECK(v == 0);
    else
      inside += v != 0 ? 1 : 0;
  }
  CHECK(inside > 0);

  SUBCASE("modality and geometry mismatches are errors") {
    CHECK(contains(
        error_of([&] { orch::infer_bundle(bundle, {&neo, &neo}, mask); }),
        "modality mismatch"));
    vol::LabelMap small(Dims3{16, 16, 16}, mask.spacing);
    CHECK(contains(
        error_of([&] { orch::infer_bundle(bundle, {&neo}, small); }),
        "grids differ"));
    CHECK(contains(error_of([&] {
                     orch::infer_bundle(p2fx().dir + "/gen_ab.bundle", {&neo},
                                        mask);
                   }),
                   "expected a segmenter"));
  }

  SUBCASE("an already normalized input raises the preprocessing warning") {
    std::string warning;
    orch::infer_bundle(bundle, {&neo}, mask, &warning);
    CHECK(warning.empty());
    const vol::Volume pre = orch::to_model_space(neo, mask);
    orch::infer_bundle(bundle, {&pre}, mask, &warning);
    CHECK(contains(warning, "normalized again"));
  }
}
