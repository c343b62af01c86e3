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

#include "iseg/orchestrator/orchestrator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <utility>

#include "iseg/core/common.hpp"
#include "iseg/core/rng.hpp"
#include "iseg/nets/bundle.hpp"
#include "iseg/nets/tape.hpp"
#include "iseg/nets/warp.hpp"
#include "iseg/preprocess/preprocess.hpp"
#include "iseg/vol/nifti.hpp"

namespace fs = std::filesystem;

namespace iseg::orch {
namespace {

constexpr const char* kPipelineNames[] = {
    "P1_AUNet", "P2_Cyc_AUNet", "P3_Cyc_AUNet_VM", "P4_Cyc_AUNet_iBEAT",
    "P5_Cyc_AUNet_iBEAT_AUNet"};

void check_keys(const nlohmann::json& j,
                std::initializer_list<const char*> allowed,
                const std::string& where) {
  require(j.is_object(), where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    require(known, "unknown config key: " + where + "." + key);
  }
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

void write_json_file(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write " + path);
  out << j.dump(2) << '\n';
}

void append_ndjson(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::app);
  require(out.good(), "cannot append to " + path);
  out << j.dump() << '\n';
}

/// Last record of an ndjson log, or an empty object for a missing log.
nlohmann::ordered_json read_last_record(const std::string& log_path) {
  std::ifstream in(log_path);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  if (last.empty()) return nlohmann::ordered_json::object();
  return nlohmann::ordered_json::parse(last);
}

/// Config echo with the fields that may legitimately change between a run
/// and its resume stripped out.
nlohmann::ordered_json identity_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j = cfg.to_json();
  j.erase("epochs");
  j.erase("overwrite");
  return j;
}

struct StageContext {
  std::string dir;
  int start_epoch = 0;
  bool resumed = false;
};

/// Create or reopen a stage directory. A completed stage refuses to run
/// again unless the new request extends the epoch count (which resumes)
/// or overwrite wipes it. A stage interrupted mid-run resumes from its
/// cursor. The stored config echo must match the request so a resumed
/// run cannot silently change hyperparameters.
StageContext prepare_stage(const ExperimentConfig& cfg,
                           const std::string& stage, bool extendable) {
  StageContext sc;
  sc.dir = stage_dir(cfg, stage);
  RunState st = read_run_state(sc.dir);
  if (cfg.overwrite && fs::exists(sc.dir)) {
    fs::remove_all(sc.dir);
    st = RunState{};
  } else if (st.done) {
    const bool extend = extendable && cfg.epochs > st.completed_epochs;
    require(extend, "stage '" + stage + "' is already complete under " +
                        sc.dir + "; set overwrite to redo it");
    fs::remove(sc.dir + "/done.json");
  }
  fs::create_directories(sc.dir);
  const std::string cpath = sc.dir + "/config.json";
  if (fs::exists(cpath)) {
    ExperimentConfig stored = ExperimentConfig::from_json(read_json_file(cpath));
    require(identity_json(stored) == identity_json(cfg),
            "run config stored under " + sc.dir +
                " differs from the request; use a new run name or set "
                "overwrite");
  }
  write_json_file(cpath, cfg.to_json());
  sc.start_epoch = st.completed_epochs;
  sc.resumed = sc.start_epoch > 0;
  return sc;
}

void write_state(const std::string& dir, int completed_epochs) {
  write_json_file(dir + "/state.json",
                  {{"completed_epochs", completed_epochs}});
}

void finalize_stage(const std::string& dir, const std::string& stage,
                    int epochs, const nlohmann::ordered_json& last) {
  write_json_file(dir + "/done.json",
                  {{"stage", stage}, {"epochs", epochs}, {"last", last}});
}

/// Fail-fast prerequisite check, run before any data is loaded.
void require_stage_done(const ExperimentConfig& cfg, const std::string& stage,
                        const char* who) {
  const std::string dir = stage_dir(cfg, stage);
  require(read_run_state(dir).done,
          std::string(who) + " requires a completed '" + stage +
              "' stage under " + dir + "; run that pipeline first");
}

std::uint64_t role_seed(std::uint64_t seed, std::uint64_t role) {
  return Rng::derive(seed, role).next_u64();
}

Rng epoch_rng(std::uint64_t seed, std::uint64_t stage_tag, int epoch) {
  return Rng::derive(seed, (stage_tag << 32) | std::uint64_t(epoch));
}

/// Streaming per-key means over an epoch, insertion ordered for the log.
class MeanLog {
 public:
  void add(const std::string& key, double v) {
    auto it = index_.find(key);
    if (it == index_.end()) {
      index_[key] = keys_.size();
      keys_.push_back(key);
      sum_.push_back(v);
      count_.push_back(1);
    } else {
      sum_[it->second] += v;
      ++count_[it->second];
    }
  }

  void add(const std::vector<std::pair<std::string, double>>& comps) {
    for (const auto& [k, v] : comps) add(k, v);
  }

  double mean(const std::string& key) const {
    auto it = index_.find(key);
    require(it != index_.end(), "no logged value named " + key);
    return sum_[it->second] / double(count_[it->second]);
  }

  bool finite() const {
    for (double s : sum_)
      if (!std::isfinite(s)) return false;
    return true;
  }

  nlohmann::ordered_json record(int epoch) const {
    nlohmann::ordered_json j{{"epoch", epoch}};
    for (std::size_t i = 0; i < keys_.size(); ++i)
      j[keys_[i]] = sum_[i] / double(count_[i]);
    return j;
  }

 private:
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> keys_;
  std::vector<double> sum_;
  std::vector<std::size_t> count_;
};

[[noreturn]] void abort_diverged(const std::string& stage,
                                 const std::string& dir, int epoch) {
  fail("stage '" + stage + "' diverged with a non-finite loss at epoch " +
       std::to_string(epoch) + "; the last finished checkpoint is kept under " +
       dir);
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  rng.shuffle(order);
  return order;
}

vol::LabelMap subject_brain_mask(const ExperimentConfig& cfg,
                                 const std::string& labels_path,
                                 const vol::Volume& img) {
  if (cfg.mask_source == "labels")
    return mask_from_labels(vol::load_labels(labels_path));
  if (cfg.mask_source == "strip") return prep::strip_skull(img);
  fail("mask_source 'three' only applies to P4");
}

TensorF stack_model_space(const std::vector<const vol::Volume*>& images,
                          const vol::LabelMap& mask) {
  TensorF x(int(images.size()), mask.data.dims());
  for (std::size_t c = 0; c < images.size(); ++c) {
    const vol::Volume n = to_model_space(*images[c], mask);
    std::copy(n.data.chan(0), n.data.chan(0) + n.data.spatial(),
              x.chan(int(c)));
  }
  return x;
}

struct SegItem {
  TensorF x;
  vol::LabelMap labels;
};

/// Shared segmenter training loop for P1 and P5. One subject per step,
/// per-epoch checkpointing with optimizer state, divergence abort that
/// leaves the previous checkpoint untouched.
TrainResult train_segmenter_stage(const ExperimentConfig& cfg,
                                  const std::string& stage,
                                  std::uint64_t stage_tag,
                                  std::uint64_t init_role,
                                  const std::vector<SegItem>& items) {
  const StageContext sc = prepare_stage(cfg, stage, true);
  const std::string log_path = sc.dir + "/log.ndjson";
  const std::string bundle_path = sc.dir + "/segmenter.bundle";

  nets::Segmenter<float> seg(cfg.segmenter, role_seed(cfg.seed, init_role));
  nets::AdamOpt opt;
  opt.lr = float(cfg.segmenter.lr);
  if (sc.resumed)
    nets::load_bundle(bundle_path, nets::Segmenter<float>::kKind,
                      cfg.segmenter.to_json(), seg.params, &opt);

  nlohmann::ordered_json last = read_last_record(log_path);
  for (int e = sc.start_epoch; e < cfg.epochs; ++e) {
    Rng rng = epoch_rng(cfg.seed, stage_tag, e);
    MeanLog log;
    for (std::size_t k : shuffled_indices(items.size(), rng)) {
      const SegItem& item = items[k];
      nets::Tape<float> t;
      auto* pred = seg.forward(t, t.input(item.x, false));
      auto* loss = losses::seg_loss(t, pred, item.labels);
      t.backward(loss);
      opt.step(seg.params);
      seg.params.zero_grad();
      log.add("seg", double(loss->val().data()[0]));
    }
    last = log.record(e);
    append_ndjson(log_path, last);
    if (!log.finite()) abort_diverged(stage, sc.dir, e);
    nets::save_bundle(bundle_path, nets::Segmenter<float>::kKind,
                      cfg.segmenter.to_json(), stage, seg.params, &opt);
    write_state(sc.dir, e + 1);
  }
  finalize_stage(sc.dir, stage, cfg.epochs, last);
  return TrainResult{sc.dir, cfg.epochs, sc.resumed, last};
}

std::vector<SegItem> load_p1_items(const phantom::CohortManifest& cohort,
                                   const ExperimentConfig& cfg) {
  std::vector<SegItem> items;
  items.reserve(cohort.train_ids.size());
  for (const std::string& id : cohort.train_ids) {
    const std::string sdir = cohort.subject_dir(id);
    vol::Volume img = vol::load_volume(sdir + "/neo_T2.nii.gz");
    vol::LabelMap labels = vol::load_labels(sdir + "/labels_neo.nii.gz");
    vol::LabelMap mask = cfg.mask_source == "labels"
                             ? mask_from_labels(labels)
                             : subject_brain_mask(
                                   cfg, sdir + "/labels_neo.nii.gz", img);
    items.push_back(
        SegItem{stack_model_space({&img}, mask), std::move(labels)});
  }
  return items;
}

struct P2Item {
  TensorF a;  // neonatal T2 in model space
  vol::LabelMap labels_a;
  TensorF b;  // real 6-month T2 in model space
};

std::vector<P2Item> load_p2_items(const phantom::CohortManifest& cohort,
                                  const ExperimentConfig& cfg) {
  std::vector<P2Item> items;
  items.reserve(cohort.train_ids.size());
  for (const std::string& id : cohort.train_ids) {
    const std::string sdir = cohort.subject_dir(id);
    vol::Volume neo = vol::load_volume(sdir + "/neo_T2.nii.gz");
    vol::Volume m6 = vol::load_volume(sdir + "/m6_T2.nii.gz");
    vol::LabelMap labels = vol::load_labels(sdir + "/labels_neo.nii.gz");
    vol::LabelMap mask_a =
        cfg.mask_source == "labels"
            ? mask_from_labels(labels)
            : subject_brain_mask(cfg, sdir + "/labels_neo.nii.gz", neo);
    vol::LabelMap mask_b =
        subject_brain_mask(cfg, sdir + "/labels_m6.nii.gz", m6);
    items.push_back(P2Item{stack_model_space({&neo}, mask_a),
                           std::move(labels),
                           stack_model_space({&m6}, mask_b)});
  }
  return items;
}

struct P2Models {
  nets::Generator<float> g_ab;
  nets::Generator<float> g_ba;
  nets::Discriminator<float> d_a;
  nets::Discriminator<float> d_b;
  nets::Segmenter<float> seg;
  nets::AdamOpt o_gab, o_gba, o_da, o_db, o_seg;

  P2Models(const ExperimentConfig& cfg)
      : g_ab(cfg.gan, role_seed(cfg.seed, 0x2AB)),
        g_ba(cfg.gan, role_seed(cfg.seed, 0x2BA)),
        d_a(cfg.gan, role_seed(cfg.seed, 0x2DA)),
        d_b(cfg.gan, role_seed(cfg.seed, 0x2DB)),
        seg(cfg.segmenter, role_seed(cfg.seed, 0x25E)) {
    o_gab.lr = o_gba.lr = o_da.lr = o_db.lr = float(cfg.gan.lr);
    o_seg.lr = float(cfg.segmenter.lr);
  }

  void save(const ExperimentConfig& cfg, const std::string& dir,
            const std::string& stage) {
    const auto gj = cfg.gan.to_json();
    nets::save_bundle(dir + "/gen_ab.bundle", "generator", gj, stage,
                      g_ab.params, &o_gab);
    nets::save_bundle(dir + "/gen_ba.bundle", "generator", gj, stage,
                      g_ba.params, &o_gba);
    nets::save_bundle(dir + "/disc_a.bundle", "discriminator", gj, stage,
                      d_a.params, &o_da);
    nets::save_bundle(dir + "/disc_b.bundle", "discriminator", gj, stage,
                      d_b.params, &o_db);
    nets::save_bundle(dir + "/segmenter.bundle", "segmenter",
                      cfg.segmenter.to_json(), stage, seg.params, &o_seg);
  }

  void load(const ExperimentConfig& cfg, const std::string& dir) {
    const auto gj = cfg.gan.to_json();
    nets::load_bundle(dir + "/gen_ab.bundle", "generator", gj, g_ab.params,
                      &o_gab);
    nets::load_bundle(dir + "/gen_ba.bundle", "generator", gj, g_ba.params,
                      &o_gba);
    nets::load_bundle(dir + "/disc_a.bundle", "discriminator", gj, d_a.params,
                      &o_da);
    nets::load_bundle(dir + "/disc_b.bundle", "discriminator", gj, d_b.params,
                      &o_db);
    nets::load_bundle(dir + "/segmenter.bundle", "segmenter",
                      cfg.segmenter.to_json(), seg.params, &o_seg);
  }
};

struct P3Item {
  TensorF moving;  // translated neonatal volume, frozen generator output
  TensorF fixed;   // real 6-month volume in model space
  vol::LabelMap labels;
};

std::vector<P3Item> load_p3_items(const phantom::CohortManifest& cohort,
                                  const ExperimentConfig& cfg,
                                  nets::Generator<float>& g_ab) {
  std::vector<P3Item> items;
  items.reserve(cohort.train_ids.size());
  for (const std::string& id : cohort.train_ids) {
    const std::string sdir = cohort.subject_dir(id);
    vol::Volume neo = vol::load_volume(sdir + "/neo_T2.nii.gz");
    vol::Volume m6 = vol::load_volume(sdir + "/m6_T2.nii.gz");
    vol::LabelMap labels = vol::load_labels(sdir + "/labels_neo.nii.gz");
    vol::LabelMap mask_a =
        cfg.mask_source == "labels"
            ? mask_from_labels(labels)
            : subject_brain_mask(cfg, sdir + "/labels_neo.nii.gz", neo);
    vol::LabelMap mask_b =
        subject_brain_mask(cfg, sdir + "/labels_m6.nii.gz", m6);
    const TensorF a = stack_model_space({&neo}, mask_a);
    // The generator is frozen in P3, so its output per subject is a
    // constant and can be synthesized once up front.
    nets::Tape<float> t;
    TensorF moving = g_ab.forward(t, t.input(a, false))->val();
    items.push_back(P3Item{std::move(moving),
                           stack_model_space({&m6}, mask_b),
                           std::move(labels)});
  }
  return items;
}

TrainResult train_p3_stage(const phantom::CohortManifest& cohort,
                           const ExperimentConfig& cfg,
                           const std::string& stage) {
  require_stage_done(cfg, "p2", pipeline_name(PipelineId::p3));
  const std::string p2dir = stage_dir(cfg, "p2");
  const StageContext sc = prepare_stage(cfg, stage, true);
  const std::string log_path = sc.dir + "/log.ndjson";

  nets::Generator<float> g_ab(cfg.gan, 1);
  nets::load_bundle(p2dir + "/gen_ab.bundle", "generator", cfg.gan.to_json(),
                    g_ab.params);

  nets::RegNet<float> reg(cfg.regnet, role_seed(cfg.seed, 0x33F));
  nets::AdamOpt o_reg;
  o_reg.lr = float(cfg.regnet.lr);
  nets::Segmenter<float> seg(cfg.segmenter, role_seed(cfg.seed, 0x35E));
  nets::AdamOpt o_seg;
  o_seg.lr = float(cfg.segmenter.lr);

  if (sc.resumed) {
    nets::load_bundle(sc.dir + "/regnet.bundle", "regnet",
                      cfg.regnet.to_json(), reg.params, &o_reg);
    nets::load_bundle(sc.dir + "/segmenter.bundle", "segmenter",
                      cfg.segmenter.to_json(), seg.params, &o_seg);
  } else if (!cfg.fresh_segmenter) {
    nets::load_bundle(p2dir + "/segmenter.bundle", "segmenter",
                      cfg.segmenter.to_json(), seg.params);
  }

  const std::vector<P3Item> items = load_p3_items(cohort, cfg, g_ab);
  nlohmann::ordered_json last = read_last_record(log_path);
  for (int e = sc.start_epoch; e < cfg.epochs; ++e) {
    Rng rng = epoch_rng(cfg.seed, 3, e);
    MeanLog log;
    for (std::size_t k : shuffled_indices(items.size(), rng)) {
      const P3Item& item = items[k];
      nets::Tape<float> t;
      auto* m = t.input(item.moving, false);
      auto* f = t.input(item.fixed, false);
      auto* phi = reg.forward(t, m, f);
      losses::RegLossParts parts;
      auto nodes = losses::registration_loss(t, f, m, phi, cfg.weights,
                                             &parts);
      t.backward(nodes.total);
      o_reg.step(reg.params);
      reg.params.zero_grad();
      log.add("similarity", parts.similarity);
      log.add("smooth", parts.smooth);
      log.add("reg_total", parts.total);
      log.add("fold_fraction", folding_fraction(phi->val()));

      // Fine-tune the segmenter on the warped translated volume with the
      // matching warped labels, the same pairing its deployment sees.
      vol::Field fld;
      fld.data = phi->val();
      fld.spacing = item.labels.spacing;
      fld.affine = item.labels.affine;
      const vol::LabelMap warped_labels =
          nets::warp_labels(item.labels, fld);
      nets::Tape<float> ts;
      auto* pred = seg.forward(ts, ts.input(nodes.warped->val(), false));
      auto* sl = losses::seg_loss(ts, pred, warped_labels);
      ts.backward(sl);
      o_seg.step(seg.params);
      seg.params.zero_grad();
      log.add("seg", double(sl->val().data()[0]));
    }
    last = log.record(e);
    append_ndjson(log_path, last);
    if (!log.finite()) abort_diverged(stage, sc.dir, e);
    if (log.mean("fold_fraction") > 0.01)
      append_ndjson(log_path,
                    {{"epoch", e},
                     {"warning", "field folding above one percent"},
                     {"fold_fraction", log.mean("fold_fraction")}});
    nets::save_bundle(sc.dir + "/regnet.bundle", "regnet",
                      cfg.regnet.to_json(), stage, reg.params, &o_reg);
    nets::save_bundle(sc.dir + "/segmenter.bundle", "segmenter",
                      cfg.segmenter.to_json(), stage, seg.params, &o_seg);
    write_state(sc.dir, e + 1);
  }
  finalize_stage(sc.dir, stage, cfg.epochs, last);
  return TrainResult{sc.dir, cfg.epochs, sc.resumed, last};
}

std::string format_lambda(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

const char* pipeline_name(PipelineId id) {
  return kPipelineNames[int(id)];
}

PipelineId pipeline_from_name(const std::string& name) {
  for (int i = 0; i < 5; ++i)
    if (name == kPipelineNames[i]) return PipelineId(i);
  fail("unknown pipeline: " + name);
}

void ExperimentConfig::validate() const {
  require(!run_name.empty() && run_name.find('/') == std::string::npos &&
              run_name.find(' ') == std::string::npos,
          "run_name must be a simple directory name");
  require(!runs_root.empty(), "runs_root must not be empty");
  require(epochs >= 1, "epochs must be at least 1");
  segmenter.validate();
  gan.validate();
  regnet.validate();
  weights.validate();
  require(mask_source == "labels" || mask_source == "strip" ||
              mask_source == "three",
          "mask_source must be labels, strip or three");
  fusion::validate_code_map(fusion::parse_code_map(code_map));
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  return nlohmann::ordered_json{
      {"run_name", run_name},
      {"runs_root", runs_root},
      {"cohort", cohort},
      {"pipeline", pipeline_name(pipeline)},
      {"seed", seed},
      {"exact", exact},
      {"epochs", epochs},
      {"segmenter", segmenter.to_json()},
      {"gan", gan.to_json()},
      {"regnet", regnet.to_json()},
      {"weights", weights.to_json()},
      {"variant", fusion::pseudo_variant_name(variant)},
      {"fresh_segmenter", fresh_segmenter},
      {"three_tissue_dir", three_tissue_dir},
      {"rule", rule.to_json()},
      {"code_map", code_map},
      {"mask_source", mask_source},
      {"overwrite", overwrite}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  check_keys(j,
             {"run_name", "runs_root", "cohort", "pipeline", "seed", "exact",
              "epochs", "segmenter", "gan", "regnet", "weights", "variant",
              "fresh_segmenter", "three_tissue_dir", "rule", "code_map",
              "mask_source", "overwrite"},
             "experiment");
  ExperimentConfig c;
  c.run_name = j.value("run_name", c.run_name);
  c.runs_root = j.value("runs_root", c.runs_root);
  c.cohort = j.value("cohort", c.cohort);
  if (j.contains("pipeline"))
    c.pipeline = pipeline_from_name(j.at("pipeline").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.exact = j.value("exact", c.exact);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("segmenter")) {
    check_keys(j.at("segmenter"),
               {"in_channels", "out_channels", "filters", "lr"}, "segmenter");
    c.segmenter = nets::SegmenterConfig::from_json(j.at("segmenter"));
  }
  if (j.contains("gan")) {
    check_keys(j.at("gan"),
               {"in_channels", "out_channels", "gen_filters", "disc_filters",
                "lr"},
               "gan");
    c.gan = nets::GanConfig::from_json(j.at("gan"));
  }
  if (j.contains("regnet")) {
    check_keys(j.at("regnet"), {"filters", "lr"}, "regnet");
    c.regnet = nets::RegNetConfig::from_json(j.at("regnet"));
  }
  if (j.contains("weights")) {
    check_keys(j.at("weights"),
               {"lambda_smooth", "lncc_window", "lambda_cycle",
                "lambda_identity", "lambda_seg", "smooth_sum_form"},
               "weights");
    c.weights = losses::LossWeights::from_json(j.at("weights"));
  }
  if (j.contains("variant"))
    c.variant =
        fusion::pseudo_variant_from_name(j.at("variant").get<std::string>());
  c.fresh_segmenter = j.value("fresh_segmenter", c.fresh_segmenter);
  c.three_tissue_dir = j.value("three_tissue_dir", c.three_tissue_dir);
  if (j.contains("rule")) {
    check_keys(j.at("rule"), {"deep_structures_win"}, "rule");
    c.rule = fusion::FusionRule::from_json(j.at("rule"));
  }
  c.code_map = j.value("code_map", c.code_map);
  c.mask_source = j.value("mask_source", c.mask_source);
  c.overwrite = j.value("overwrite", c.overwrite);
  c.validate();
  return c;
}

std::string stage_dir(const ExperimentConfig& cfg, const std::string& stage) {
  return cfg.runs_root + "/" + cfg.run_name + "/" + stage;
}

RunState read_run_state(const std::string& dir) {
  RunState st;
  const std::string spath = dir + "/state.json";
  if (fs::exists(spath))
    st.completed_epochs = read_json_file(spath).value("completed_epochs", 0);
  st.done = fs::exists(dir + "/done.json");
  return st;
}

vol::Volume to_model_space(const vol::Volume& v, const vol::LabelMap& mask) {
  vol::Volume n = vol::normalize_intensity(v, mask);
  float* p = n.data.data();
  for (i64 i = 0; i < n.data.size(); ++i)
    p[i] = std::clamp(p[i] * 0.25f, -1.0f, 1.0f);
  return n;
}

vol::LabelMap mask_from_labels(const vol::LabelMap& labels) {
  vol::LabelMap m = labels;
  std::uint8_t* p = m.data.data();
  for (i64 i = 0; i < m.data.size(); ++i) p[i] = p[i] != 0 ? 1 : 0;
  return m;
}

double folding_fraction(const TensorF& field) {
  require(field.c() == 3, "folding_fraction: field must have three channels");
  const Dims3 d = field.dims();
  const i64 sx = 1, sy = d.w, sz = i64(d.h) * d.w;
  // Derivative of one displacement channel along one axis, central inside
  // the grid and one-sided at the faces.
  auto deriv = [&](const float* u, i64 i, int pos, int n, i64 stride) {
    if (pos > 0 && pos + 1 < n)
      return 0.5 * (double(u[i + stride]) - double(u[i - stride]));
    if (pos + 1 < n) return double(u[i + stride]) - double(u[i]);
    if (pos > 0) return double(u[i]) - double(u[i - stride]);
    return 0.0;
  };
  i64 bad = 0;
  i64 i = 0;
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x, ++i) {
        double J[3][3];
        for (int c = 0; c < 3; ++c) {
          const float* u = field.chan(c);
          J[c][0] = deriv(u, i, x, d.w, sx) + (c == 0 ? 1.0 : 0.0);
          J[c][1] = deriv(u, i, y, d.h, sy) + (c == 1 ? 1.0 : 0.0);
          J[c][2] = deriv(u, i, z, d.d, sz) + (c == 2 ? 1.0 : 0.0);
        }
        const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        if (det <= 0.0) ++bad;
      }
  return double(bad) / double(field.spatial());
}

TrainResult train_p1(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg) {
  cfg.validate();
  require(cfg.segmenter.in_channels == 1,
          "P1 trains on the neonatal T2 channel only");
  return train_segmenter_stage(cfg, "p1", 1, 0x101,
                               load_p1_items(cohort, cfg));
}

TrainResult train_p2(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg) {
  cfg.validate();
  require(cfg.gan.in_channels == 1,
          "P2 translates single-channel volumes");
  require(cfg.segmenter.in_channels == 1,
          "P2 trains the segmenter on translated single-channel volumes");
  const StageContext sc = prepare_stage(cfg, "p2", true);
  const std::string log_path = sc.dir + "/log.ndjson";

  P2Models m(cfg);
  if (sc.resumed) m.load(cfg, sc.dir);
  const std::vector<P2Item> items = load_p2_items(cohort, cfg);

  losses::CycleGanModels<float> nets_{m.g_ab, m.g_ba, m.d_a, m.d_b, &m.seg};
  nlohmann::ordered_json last = read_last_record(log_path);
  for (int e = sc.start_epoch; e < cfg.epochs; ++e) {
    Rng rng = epoch_rng(cfg.seed, 2, e);
    // Independent shuffles make the A and B streams unpaired even though
    // the phantom cohort stores both timepoints per subject.
    const auto order_a = shuffled_indices(items.size(), rng);
    const auto order_b = shuffled_indices(items.size(), rng);
    MeanLog log;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const P2Item& A = items[order_a[i]];
      const P2Item& B = items[order_b[i]];
      nets::Tape<float> gt, dat, dbt;
      auto r = losses::cyclegan_total(gt, dat, dbt, nets_, A.a, B.b,
                                      &A.labels_a, cfg.weights);
      gt.backward(r.gen_total);
      m.o_gab.step(m.g_ab.params);
      m.o_gba.step(m.g_ba.params);
      if (cfg.weights.lambda_seg > 0.0) m.o_seg.step(m.seg.params);
      // The generator objective also probed the discriminators, so their
      // accumulated gradients are stale for the discriminator step.
      m.g_ab.params.zero_grad();
      m.g_ba.params.zero_grad();
      m.seg.params.zero_grad();
      m.d_a.params.zero_grad();
      m.d_b.params.zero_grad();
      dat.backward(r.d_a_total);
      m.o_da.step(m.d_a.params);
      m.d_a.params.zero_grad();
      dbt.backward(r.d_b_total);
      m.o_db.step(m.d_b.params);
      m.d_b.params.zero_grad();
      log.add(r.components);
    }
    last = log.record(e);
    append_ndjson(log_path, last);
    if (!log.finite()) abort_diverged("p2", sc.dir, e);
    if (log.mean("d_a") < 0.01 || log.mean("d_b") < 0.01)
      append_ndjson(log_path, {{"epoch", e},
                               {"warning", "discriminator collapse"},
                               {"d_a", log.mean("d_a")},
                               {"d_b", log.mean("d_b")}});
    m.save(cfg, sc.dir, "p2");
    write_state(sc.dir, e + 1);
  }
  finalize_stage(sc.dir, "p2", cfg.epochs, last);
  return TrainResult{sc.dir, cfg.epochs, sc.resumed, last};
}

TrainResult train_p3(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg) {
  cfg.validate();
  return train_p3_stage(cohort, cfg, "p3");
}

std::vector<SweepRow> sweep_p3(const phantom::CohortManifest& cohort,
                               const ExperimentConfig& cfg,
                               const std::vector<double>& lambdas) {
  cfg.validate();
  require(!lambdas.empty(), "sweep needs at least one lambda");
  std::vector<SweepRow> rows;
  for (double lam : lambdas) {
    ExperimentConfig c = cfg;
    c.weights.lambda_smooth = lam;
    const TrainResult r =
        train_p3_stage(cohort, c, "p3_lambda_" + format_lambda(lam));
    SweepRow row;
    row.lambda = lam;
    row.similarity = r.last.value("similarity", 0.0);
    row.smooth = r.last.value("smooth", 0.0);
    row.total = r.last.value("reg_total", 0.0);
    row.fold_fraction = r.last.value("fold_fraction", 0.0);
    row.dir = r.dir;
    rows.push_back(row);
  }
  const std::string base = cfg.runs_root + "/" + cfg.run_name;
  std::ofstream csv(base + "/sweep.csv", std::ios::trunc);
  csv << "lambda,similarity,smooth,total,fold_fraction,dir\n";
  std::ofstream md(base + "/sweep.md", std::ios::trunc);
  md << "| lambda | similarity | smoothness | total | fold fraction |\n"
     << "|---:|---:|---:|---:|---:|\n";
  char buf[256];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%g,%.6f,%.6f,%.6f,%.6f,%s\n", r.lambda,
                  r.similarity, r.smooth, r.total, r.fold_fraction,
                  r.dir.c_str());
    csv << buf;
    std::snprintf(buf, sizeof(buf), "| %g | %.6f | %.6f | %.6f | %.6f |\n",
                  r.lambda, r.similarity, r.smooth, r.total, r.fold_fraction);
    md << buf;
  }
  return rows;
}

P4Result run_p4(const phantom::CohortManifest& cohort,
                const ExperimentConfig& cfg) {
  cfg.validate();
  require(!cfg.three_tissue_dir.empty(),
          "P4 needs three_tissue_dir pointing at the external maps");
  require_stage_done(cfg, "p2", pipeline_name(PipelineId::p4));
  const std::string seg_path = stage_dir(cfg, "p2") + "/segmenter.bundle";
  const StageContext sc = prepare_stage(cfg, "p4", false);
  const std::string log_path = sc.dir + "/log.ndjson";

  const fusion::CodeMap mapping = fusion::parse_code_map(cfg.code_map);
  nets::Segmenter<float> seg(cfg.segmenter, 1);
  nets::load_bundle(seg_path, "segmenter", cfg.segmenter.to_json(),
                    seg.params);
  const std::string eight_source = "p2 segmenter " + seg_path;

  P4Result result;
  result.dir = sc.dir;
  for (const std::string& id : cohort.all_ids()) {
    try {
      const std::string sdir = cohort.subject_dir(id);
      vol::Volume m6 = vol::load_volume(sdir + "/m6_T2.nii.gz");
      const std::string tpath =
          cfg.three_tissue_dir + "/" + id + ".nii.gz";
      fusion::ThreeTissueMap three;
      vol::LabelMap mask;
      if (cfg.mask_source == "three") {
        three = fusion::ingest_three_tissue(tpath, mapping, nullptr, tpath);
        mask = mask_from_labels(three.map);
      } else {
        mask = subject_brain_mask(cfg, sdir + "/labels_m6.nii.gz", m6);
        three = fusion::ingest_three_tissue(tpath, mapping, &mask, tpath);
      }
      const vol::LabelMap eight = infer_labels(seg, {&m6}, mask);
      const vol::LabelMap fused =
          fusion::fuse_labels(eight, three, mask, cfg.rule);
      const std::string fpath = sc.dir + "/" + id + "_fused.nii.gz";
      vol::save_labels(fused, fpath);
      nlohmann::ordered_json prov =
          fusion::fusion_provenance(eight_source, three, cfg.rule, mapping);
      prov["subject_id"] = id;
      write_json_file(sc.dir + "/" + id + "_fused.json", prov);
      result.fused[id] = fpath;
      append_ndjson(log_path, {{"subject", id}, {"ok", true}});
    } catch (const std::exception& e) {
      result.failures.push_back(id + ": " + e.what());
      append_ndjson(log_path,
                    {{"subject", id}, {"ok", false}, {"error", e.what()}});
    }
  }
  nlohmann::ordered_json fused_j = nlohmann::ordered_json::object();
  for (const auto& [id, path] : result.fused) fused_j[id] = path;
  write_json_file(sc.dir + "/summary.json",
                  {{"fused", fused_j}, {"failures", result.failures}});
  finalize_stage(sc.dir, "p4", 0,
                 {{"fused", result.fused.size()},
                  {"failed", result.failures.size()}});
  return result;
}

TrainResult train_p5(const phantom::CohortManifest& cohort,
                     const ExperimentConfig& cfg) {
  cfg.validate();
  require_stage_done(cfg, "p4", pipeline_name(PipelineId::p5));
  const nlohmann::json summary =
      read_json_file(stage_dir(cfg, "p4") + "/summary.json");
  std::map<std::string, std::string> fused;
  for (const auto& [id, path] : summary.at("fused").items())
    fused[id] = path.get<std::string>();
  const fusion::PseudoManifest pm =
      fusion::make_pseudo_labels(cohort, fused, cfg.variant);
  require(cfg.segmenter.in_channels == pm.in_channels,
          std::string("P5 variant '") + fusion::pseudo_variant_name(cfg.variant) +
              "' needs a segmenter with " + std::to_string(pm.in_channels) +
              " input channel(s)");

  std::vector<SegItem> items;
  items.reserve(pm.pairs.size());
  for (const fusion::PseudoPair& pair : pm.pairs) {
    std::vector<vol::Volume> imgs;
    for (const std::string& path : pair.images)
      imgs.push_back(vol::load_volume(path));
    const std::string ldir =
        cohort.subject_dir(pair.subject_id) + "/labels_m6.nii.gz";
    vol::LabelMap mask = cfg.mask_source == "labels"
                             ? mask_from_labels(vol::load_labels(ldir))
                             : prep::strip_skull(imgs[0]);
    std::vector<const vol::Volume*> ptrs;
    for (const vol::Volume& v : imgs) ptrs.push_back(&v);
    items.push_back(
        SegItem{stack_model_space(ptrs, mask), vol::load_labels(pair.target)});
  }
  const std::string stage =
      std::string("p5_") + fusion::pseudo_variant_name(cfg.variant);
  return train_segmenter_stage(cfg, stage, 5,
                               0x500 + std::uint64_t(cfg.variant), items);
}

vol::LabelMap infer_labels(nets::Segmenter<float>& seg,
                           const std::vector<const vol::Volume*>& images,
                           const vol::LabelMap& mask, std::string* warning) {
  require(!images.empty(), "infer: no input images");
  require(int(images.size()) == seg.cfg().in_channels,
          "segmenter expects " + std::to_string(seg.cfg().in_channels) +
              " input image(s), got " + std::to_string(images.size()) +
              " (modality mismatch)");
  for (const vol::Volume* v : images)
    require(v->data.dims() == mask.data.dims(),
            "infer: image and mask grids differ");
  if (warning != nullptr) {
    // A raw MR volume has a positive in-mask mean; one that is already
    // centered with the model-space spread was most likely normalized by
    // an earlier preprocessing pass and would be normalized twice here.
    const std::uint8_t* mp = mask.data.data();
    for (std::size_t c = 0; c < images.size(); ++c) {
      const float* ip = images[c]->data.data();
      double sum = 0.0, sq = 0.0;
      i64 n = 0;
      for (i64 i = 0; i < mask.data.size(); ++i)
        if (mp[i] != 0) {
          sum += ip[i];
          sq += double(ip[i]) * ip[i];
          ++n;
        }
      require(n > 0, "infer: empty mask");
      const double mean = sum / double(n);
      const double sd = std::sqrt(std::max(0.0, sq / double(n) - mean * mean));
      if (std::fabs(mean) < 0.05 && sd > 0.15 && sd < 0.35) {
        *warning = "input channel " + std::to_string(c) +
                   " already looks normalized (in-mask mean " +
                   std::to_string(mean) + ", spread " + std::to_string(sd) +
                   "); it will be normalized again";
        break;
      }
    }
  }
  const TensorF x = stack_model_space(images, mask);
  nets::Tape<float> t;
  auto* pred = seg.forward(t, t.input(x, false));
  vol::LabelMap lm = vol::argmax_labels(pred->val(), mask);
  std::uint8_t* lp = lm.data.data();
  const std::uint8_t* mp = mask.data.data();
  for (i64 i = 0; i < lm.data.size(); ++i)
    if (mp[i] == 0) lp[i] = 0;
  return lm;
}

vol::LabelMap infer_bundle(const std::string& bundle_path,
                           const std::vector<const vol::Volume*>& images,
                           const vol::LabelMap& mask, std::string* warning) {
  const nets::BundleInfo info = nets::peek_bundle(bundle_path);
  require(info.kind == "segmenter", "bundle " + bundle_path + " holds a '" +
                                        info.kind +
                                        "', expected a segmenter");
  const nets::SegmenterConfig scfg =
      nets::SegmenterConfig::from_json(info.config);
  nets::Segmenter<float> seg(scfg, 1);
  nets::load_bundle(bundle_path, "segmenter", scfg.to_json(), seg.params);
  return infer_labels(seg, images, mask, warning);
}

}  // namespace iseg::orch
