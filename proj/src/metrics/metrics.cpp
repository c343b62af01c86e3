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

#include "iseg/metrics/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "iseg/core/common.hpp"
#include "iseg/metrics/png.hpp"
#include "json.hpp"

namespace iseg::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kFar = 1e30;

/// One lower-envelope pass of the exact squared Euclidean distance
/// transform. Sample i sits at coordinate i*step; f holds squared distances
/// from the previous passes (kFar for "no source yet").
void dt1d(const double* f, double* d, int n, double step, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = kFar;
  for (int q = 1; q < n; ++q) {
    const double xq = double(q) * step;
    double s = 0.0;
    while (true) {
      const double xp = double(v[k]) * step;
      s = ((f[q] + xq * xq) - (f[v[k]] + xp * xp)) / (2.0 * (xq - xp));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFar;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = double(q) * step;
    while (z[k + 1] < xq) ++k;
    const double diff = xq - double(v[k]) * step;
    d[q] = diff * diff + f[v[k]];
  }
}

/// Squared distance from every voxel to the nearest seed point.
std::vector<double> edt_sq(const std::vector<std::array<int, 3>>& seeds,
                           Dims3 dims, std::array<double, 3> step) {
  std::vector<double> g(size_t(dims.voxels()), kFar);
  for (const auto& s : seeds)
    g[(size_t(s[2]) * size_t(dims.h) + size_t(s[1])) * size_t(dims.w) +
      size_t(s[0])] = 0.0;

  const int nmax = std::max({dims.d, dims.h, dims.w});
  std::vector<double> f(static_cast<size_t>(nmax));
  std::vector<double> dline(static_cast<size_t>(nmax));
  std::vector<double> z(static_cast<size_t>(nmax) + 1);
  std::vector<int> v(static_cast<size_t>(nmax));

  for (int zz = 0; zz < dims.d; ++zz)  // along x
    for (int y = 0; y < dims.h; ++y) {
      double* row = g.data() + (size_t(zz) * dims.h + y) * dims.w;
      dt1d(row, dline.data(), dims.w, step[0], v.data(), z.data());
      std::memcpy(row, dline.data(), size_t(dims.w) * sizeof(double));
    }
  for (int zz = 0; zz < dims.d; ++zz)  // along y
    for (int x = 0; x < dims.w; ++x) {
      for (int y = 0; y < dims.h; ++y)
        f[size_t(y)] = g[(size_t(zz) * dims.h + y) * dims.w + x];
      dt1d(f.data(), dline.data(), dims.h, step[1], v.data(), z.data());
      for (int y = 0; y < dims.h; ++y)
        g[(size_t(zz) * dims.h + y) * dims.w + x] = dline[size_t(y)];
    }
  for (int y = 0; y < dims.h; ++y)  // along z
    for (int x = 0; x < dims.w; ++x) {
      for (int zz = 0; zz < dims.d; ++zz)
        f[size_t(zz)] = g[(size_t(zz) * dims.h + y) * dims.w + x];
      dt1d(f.data(), dline.data(), dims.d, step[2], v.data(), z.data());
      for (int zz = 0; zz < dims.d; ++zz)
        g[(size_t(zz) * dims.h + y) * dims.w + x] = dline[size_t(zz)];
    }
  return g;
}

/// Ascending distances from each `from` voxel to the nearest `to` voxel.
std::vector<double> directed_distances(
    const std::vector<std::array<int, 3>>& from,
    const std::vector<std::array<int, 3>>& to, Dims3 dims,
    std::array<double, 3> step) {
  const auto d2 = edt_sq(to, dims, step);
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from)
    out.push_back(std::sqrt(
        d2[(size_t(p[2]) * dims.h + size_t(p[1])) * dims.w + size_t(p[0])]));
  std::sort(out.begin(), out.end());
  return out;
}

std::array<double, 3> metric_step(std::array<double, 3> spacing, Units units) {
  if (units == Units::voxel) return {1.0, 1.0, 1.0};
  for (double s : spacing) require(s > 0.0, "spacing must be positive");
  return spacing;
}

void check_same_grid(const Tensor<std::uint8_t>& a,
                     const Tensor<std::uint8_t>& b) {
  require(a.same_shape(b), "mask grids differ");
}

bool both_boundaries(const Tensor<std::uint8_t>& pred,
                     const Tensor<std::uint8_t>& gt,
                     std::vector<std::array<int, 3>>& bp,
                     std::vector<std::array<int, 3>>& bg) {
  bp = vol::extract_boundary(pred);
  bg = vol::extract_boundary(gt);
  return !bp.empty() && !bg.empty();
}

Tensor<std::uint8_t> binarize(const vol::LabelMap& lm, int code) {
  Tensor<std::uint8_t> m(1, lm.data.dims());
  const std::uint8_t* src = lm.data.data();
  std::uint8_t* dst = m.data();
  for (i64 i = 0; i < m.size(); ++i) dst[i] = src[i] == code ? 1 : 0;
  return m;
}

double mean_defined(const double* vals, int n, int* excluded = nullptr) {
  double sum = 0.0;
  int cnt = 0;
  for (int i = 0; i < n; ++i)
    if (!std::isnan(vals[i])) {
      sum += vals[i];
      ++cnt;
    }
  if (excluded) *excluded = n - cnt;
  return cnt == 0 ? kNaN : sum / cnt;
}

TissueRow row_average(const std::array<TissueRow, vol::kNumLabels - 1>& rows) {
  double dices[vol::kNumLabels - 1], hds[vol::kNumLabels - 1],
      assds[vol::kNumLabels - 1];
  for (int i = 0; i < vol::kNumLabels - 1; ++i) {
    dices[i] = rows[size_t(i)].dice;
    hds[i] = rows[size_t(i)].hd95;
    assds[i] = rows[size_t(i)].assd;
  }
  TissueRow avg;
  avg.dice = mean_defined(dices, vol::kNumLabels - 1);
  avg.hd95 = mean_defined(hds, vol::kNumLabels - 1);
  avg.assd = mean_defined(assds, vol::kNumLabels - 1);
  return avg;
}

std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  if (std::isnan(v)) return "n/a";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

Units units_from_name(const std::string& s) {
  if (s == "voxel") return Units::voxel;
  if (s == "mm") return Units::mm;
  fail("unknown units: " + s);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

const char* units_name(Units u) { return u == Units::voxel ? "voxel" : "mm"; }

double percentile(const std::vector<double>& sorted, double p) {
  require(!sorted.empty(), "percentile of empty set");
  require(p >= 0.0 && p <= 100.0, "percentile out of range");
  const double rank = p / 100.0 * double(sorted.size() - 1);
  const size_t lo = size_t(rank);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = rank - double(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

double dice(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt) {
  check_same_grid(pred, gt);
  i64 np = 0, ng = 0, ni = 0;
  const std::uint8_t* a = pred.data();
  const std::uint8_t* b = gt.data();
  for (i64 i = 0; i < pred.size(); ++i) {
    np += a[i] != 0;
    ng += b[i] != 0;
    ni += (a[i] != 0) && (b[i] != 0);
  }
  if (np + ng == 0) return kNaN;
  return 2.0 * double(ni) / double(np + ng);
}

double hd95(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
            std::array<double, 3> spacing, Units units, bool pooled) {
  check_same_grid(pred, gt);
  std::vector<std::array<int, 3>> bp, bg;
  if (!both_boundaries(pred, gt, bp, bg)) return kNaN;
  const auto step = metric_step(spacing, units);
  auto dp = directed_distances(bp, bg, pred.dims(), step);
  auto dg = directed_distances(bg, bp, pred.dims(), step);
  if (pooled) {
    dp.insert(dp.end(), dg.begin(), dg.end());
    std::sort(dp.begin(), dp.end());
    return percentile(dp, 95.0);
  }
  return std::max(percentile(dp, 95.0), percentile(dg, 95.0));
}

double assd(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
            std::array<double, 3> spacing, Units units) {
  check_same_grid(pred, gt);
  std::vector<std::array<int, 3>> bp, bg;
  if (!both_boundaries(pred, gt, bp, bg)) return kNaN;
  const auto step = metric_step(spacing, units);
  const auto dp = directed_distances(bp, bg, pred.dims(), step);
  const auto dg = directed_distances(bg, bp, pred.dims(), step);
  double sum = 0.0;  // ascending order keeps the accumulation reproducible
  for (double v : dp) sum += v;
  for (double v : dg) sum += v;
  return sum / double(dp.size() + dg.size());
}

SubjectScores evaluate_subject(const vol::LabelMap& pred,
                               const vol::LabelMap& gt, Units units,
                               const std::string& subject_id) {
  require(pred.data.same_shape(gt.data), "label grids differ");
  if (units == Units::mm)
    for (int a = 0; a < 3; ++a)
      require(std::abs(pred.spacing[size_t(a)] - gt.spacing[size_t(a)]) <
                  1e-9,
              "spacing differs between prediction and reference");

  SubjectScores s;
  s.subject_id = subject_id;
  for (int code = 1; code < vol::kNumLabels; ++code) {
    const auto mp = binarize(pred, code);
    const auto mg = binarize(gt, code);
    TissueRow& row = s.tissues[size_t(code - 1)];
    row.dice = dice(mp, mg);
    row.hd95 = hd95(mp, mg, gt.spacing, units);
    row.assd = assd(mp, mg, gt.spacing, units);
  }
  s.average = row_average(s.tissues);
  return s;
}

MetricReport make_report(const std::string& pipeline, Units units,
                         std::vector<SubjectScores> subjects) {
  MetricReport r;
  r.pipeline = pipeline;
  r.units = units;
  r.subjects = std::move(subjects);
  const int n = int(r.subjects.size());
  std::vector<double> col(size_t(std::max(n, 1)));
  for (int t = 0; t < vol::kNumLabels - 1; ++t) {
    for (int m = 0; m < 3; ++m) {
      for (int i = 0; i < n; ++i) {
        const TissueRow& row = r.subjects[size_t(i)].tissues[size_t(t)];
        col[size_t(i)] = m == 0 ? row.dice : m == 1 ? row.hd95 : row.assd;
      }
      int excluded = 0;
      const double mean = n == 0 ? kNaN : mean_defined(col.data(), n, &excluded);
      r.nan_counts[size_t(t)][size_t(m)] = excluded;
      TissueRow& dst = r.tissue_means[size_t(t)];
      (m == 0 ? dst.dice : m == 1 ? dst.hd95 : dst.assd) = mean;
    }
  }
  r.average = row_average(r.tissue_means);
  return r;
}

TTestResult paired_ttest(const std::vector<double>& a,
                         const std::vector<double>& b) {
  require(a.size() == b.size(), "paired t-test needs equal-length inputs");
  require(a.size() >= 2, "paired t-test needs at least two pairs");
  const int n = int(a.size());
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += a[size_t(i)] - b[size_t(i)];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = a[size_t(i)] - b[size_t(i)] - mean;
    var += d * d;
  }
  var /= n - 1;

  TTestResult res;
  res.df = n - 1;
  if (var <= 0.0) {
    res.zero_variance = true;
    res.t = kNaN;
    res.p = kNaN;
    return res;
  }
  res.t = mean / std::sqrt(var / n);
  const boost::math::students_t dist(res.df);
  res.p = 2.0 * boost::math::cdf(boost::math::complement(dist,
                                                         std::fabs(res.t)));
  return res;
}

std::vector<double> subject_average_dice(const MetricReport& r) {
  std::vector<double> out;
  out.reserve(r.subjects.size());
  for (const auto& s : r.subjects) out.push_back(s.average.dice);
  return out;
}

void write_report_csv(const MetricReport& r, const std::string& path) {
  std::ofstream f(path);
  require(f.good(), "cannot open for writing: " + path);
  f << "pipeline,units,subject,tissue,dice,hd95,assd\n";
  for (const auto& s : r.subjects) {
    require(s.subject_id.find(',') == std::string::npos,
            "subject id must not contain ','");
    for (int code = 1; code < vol::kNumLabels; ++code) {
      const TissueRow& row = s.tissues[size_t(code - 1)];
      f << r.pipeline << ',' << units_name(r.units) << ',' << s.subject_id
        << ',' << vol::tissue_name(code) << ','
        << fmt_full(row.dice) << ',' << fmt_full(row.hd95) << ','
        << fmt_full(row.assd) << '\n';
    }
  }
  require(f.good(), "short write: " + path);
}

MetricReport load_report_csv(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "file not found: " + path);
  std::string line;
  require(bool(std::getline(f, line)), "empty report: " + path);
  require(line == "pipeline,units,subject,tissue,dice,hd95,assd",
          "unrecognized report header in " + path);

  std::string pipeline;
  Units units = Units::voxel;
  std::vector<SubjectScores> subjects;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto parts = split_csv_line(line);
    require(parts.size() == 7, "malformed report row in " + path);
    if (first) {
      pipeline = parts[0];
      units = units_from_name(parts[1]);
      first = false;
    } else {
      require(parts[0] == pipeline && parts[1] == units_name(units),
              "mixed pipelines in one report file");
    }
    if (subjects.empty() || subjects.back().subject_id != parts[2]) {
      subjects.emplace_back();
      subjects.back().subject_id = parts[2];
    }
    const int code = vol::tissue_from_name(parts[3]);
    require(code >= 1, "background row in report");
    TissueRow& row = subjects.back().tissues[size_t(code - 1)];
    row.dice = std::strtod(parts[4].c_str(), nullptr);
    row.hd95 = std::strtod(parts[5].c_str(), nullptr);
    row.assd = std::strtod(parts[6].c_str(), nullptr);
  }
  for (auto& s : subjects) s.average = row_average(s.tissues);
  return make_report(pipeline, units, std::move(subjects));
}

ReferenceTable load_reference_table(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "file not found: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail("cannot parse reference table " + path + ": " + e.what());
  }
  ReferenceTable t;
  t.units = j.at("units").get<std::string>();
  for (const auto& jp : j.at("pipelines")) {
    ReferencePipeline p;
    p.name = jp.at("name").get<std::string>();
    for (const auto& jr : jp.at("rows"))
      p.rows.push_back({jr.at("tissue").get<std::string>(),
                        jr.at("dice").get<std::string>(),
                        jr.at("hd95").get<std::string>(),
                        jr.at("assd").get<std::string>()});
    t.pipelines.push_back(std::move(p));
  }
  return t;
}

void write_report_markdown(const std::vector<MetricReport>& reports,
                           const std::string& path,
                           const ReferenceTable* reference) {
  require(!reports.empty(), "no reports to emit");
  std::ofstream f(path);
  require(f.good(), "cannot open for writing: " + path);

  f << "# Segmentation metrics\n\nUnits: " << units_name(reports[0].units)
    << "\n\n";
  for (const auto& r : reports)
    require(r.units == reports[0].units, "reports mix units");

  f << "| Tissue |";
  for (const auto& r : reports)
    f << ' ' << r.pipeline << " DICE | " << r.pipeline << " HD95 | "
      << r.pipeline << " ASSD |";
  f << "\n|---|";
  for (size_t i = 0; i < reports.size() * 3; ++i) f << "---|";
  f << '\n';
  auto emit_row = [&](const std::string& name, int t) {
    f << "| " << name << " |";
    for (const auto& r : reports) {
      const TissueRow& row = t < 0 ? r.average : r.tissue_means[size_t(t)];
      f << ' ' << fmt_fixed(row.dice, 3) << " | " << fmt_fixed(row.hd95, 2)
        << " | " << fmt_fixed(row.assd, 2) << " |";
    }
    f << '\n';
  };
  for (int t = 0; t < vol::kNumLabels - 1; ++t)
    emit_row(vol::tissue_name(t + 1), t);
  emit_row("Average", -1);

  int excluded = 0;
  for (const auto& r : reports)
    for (const auto& per_tissue : r.nan_counts)
      for (int c : per_tissue) excluded += c;
  if (excluded > 0)
    f << "\nExcluded " << excluded
      << " undefined entries from the averages.\n";

  if (reports.size() > 1) {
    f << "\n## Change vs " << reports[0].pipeline << "\n\n| Tissue |";
    for (size_t i = 1; i < reports.size(); ++i)
      f << ' ' << reports[i].pipeline << " dDICE | " << reports[i].pipeline
        << " dHD95 | " << reports[i].pipeline << " dASSD |";
    f << "\n|---|";
    for (size_t i = 0; i < (reports.size() - 1) * 3; ++i) f << "---|";
    f << '\n';
    auto emit_delta = [&](const std::string& name, int t) {
      f << "| " << name << " |";
      const TissueRow& base =
          t < 0 ? reports[0].average : reports[0].tissue_means[size_t(t)];
      for (size_t i = 1; i < reports.size(); ++i) {
        const TissueRow& row =
            t < 0 ? reports[i].average : reports[i].tissue_means[size_t(t)];
        f << ' ' << fmt_fixed(row.dice - base.dice, 3) << " | "
          << fmt_fixed(row.hd95 - base.hd95, 2) << " | "
          << fmt_fixed(row.assd - base.assd, 2) << " |";
      }
      f << '\n';
    };
    for (int t = 0; t < vol::kNumLabels - 1; ++t)
      emit_delta(vol::tissue_name(t + 1), t);
    emit_delta("Average", -1);
  }

  if (reference != nullptr && !reference->pipelines.empty()) {
    f << "\n## Published reference results (display only, units "
      << reference->units << ")\n\n| Tissue |";
    for (const auto& p : reference->pipelines)
      f << ' ' << p.name << " DICE | " << p.name << " HD95 | " << p.name
        << " ASSD |";
    f << "\n|---|";
    for (size_t i = 0; i < reference->pipelines.size() * 3; ++i) f << "---|";
    f << '\n';
    const size_t nrows = reference->pipelines[0].rows.size();
    for (size_t ri = 0; ri < nrows; ++ri) {
      f << "| " << reference->pipelines[0].rows[ri].tissue << " |";
      for (const auto& p : reference->pipelines) {
        require(p.rows.size() == nrows, "ragged reference table");
        f << ' ' << p.rows[ri].dice << " | " << p.rows[ri].hd95 << " | "
          << p.rows[ri].assd << " |";
      }
      f << '\n';
    }
  }
  require(f.good(), "short write: " + path);
}

std::array<std::array<std::uint8_t, 3>, vol::kNumLabels> tissue_colors() {
  return {{{0, 0, 0},
           {70, 130, 255},
           {85, 205, 120},
           {255, 238, 150},
           {170, 80, 255},
           {255, 140, 70},
           {255, 80, 130},
           {80, 220, 220},
           {255, 215, 60}}};
}

const char* plane_name(Plane p) {
  switch (p) {
    case Plane::axial: return "axial";
    case Plane::coronal: return "coronal";
    default: return "sagittal";
  }
}

void write_overlay_png(const vol::Volume& intensity,
                       const vol::LabelMap& labels, Plane plane,
                       const std::string& path, int index) {
  require(intensity.data.dims() == labels.data.dims(),
          "overlay grids differ");
  const Dims3 d = intensity.data.dims();

  int w = 0, h = 0, depth = 0;
  switch (plane) {
    case Plane::axial: w = d.w; h = d.h; depth = d.d; break;
    case Plane::coronal: w = d.w; h = d.d; depth = d.h; break;
    case Plane::sagittal: w = d.h; h = d.d; depth = d.w; break;
  }
  const int slice = index < 0 ? depth / 2 : index;
  require(slice >= 0 && slice < depth, "overlay slice out of range");

  auto voxel = [&](int px, int py) -> std::array<int, 3> {
    switch (plane) {
      case Plane::axial: return {px, py, slice};
      case Plane::coronal: return {px, slice, py};
      default: return {slice, px, py};
    }
  };

  // Robust slice window for the grayscale mapping.
  std::vector<double> vals;
  vals.reserve(size_t(w) * size_t(h));
  for (int py = 0; py < h; ++py)
    for (int px = 0; px < w; ++px) {
      const auto v = voxel(px, py);
      vals.push_back(intensity.at(v[0], v[1], v[2]));
    }
  std::vector<double> sorted = vals;
  std::sort(sorted.begin(), sorted.end());
  const double lo = percentile(sorted, 1.0);
  const double hi = percentile(sorted, 99.0);
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;

  const auto palette = tissue_colors();
  std::vector<std::uint8_t> rgb(size_t(w) * size_t(h) * 3);
  for (int py = 0; py < h; ++py)
    for (int px = 0; px < w; ++px) {
      const auto v = voxel(px, py);
      const double g =
          std::clamp((vals[size_t(py) * w + px] - lo) * scale, 0.0, 255.0);
      const std::uint8_t code = labels.at(v[0], v[1], v[2]);
      require(code < vol::kNumLabels, "label code out of range");
      std::uint8_t* px_out = rgb.data() + (size_t(py) * w + px) * 3;
      for (int c = 0; c < 3; ++c) {
        double out = g;
        if (code != 0)
          out = 0.55 * g + 0.45 * double(palette[code][size_t(c)]);
        px_out[c] = std::uint8_t(std::clamp(out, 0.0, 255.0));
      }
    }
  write_png_rgb8(path, w, h, rgb);
}

}  // namespace iseg::metrics
