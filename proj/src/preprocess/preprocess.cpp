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

#include "iseg/preprocess/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <vector>

#include "iseg/vol/nifti.hpp"

namespace fs = std::filesystem;

namespace iseg::prep {

using vol::LabelMap;
using vol::Mat4;
using vol::Volume;

nlohmann::ordered_json CropBox::to_json() const {
  return nlohmann::ordered_json{{"x0", x0}, {"y0", y0}, {"z0", z0},
                                {"x1", x1}, {"y1", y1}, {"z1", z1}};
}

CropBox CropBox::from_json(const nlohmann::json& j) {
  CropBox b;
  b.x0 = j.at("x0").get<int>();
  b.y0 = j.at("y0").get<int>();
  b.z0 = j.at("z0").get<int>();
  b.x1 = j.at("x1").get<int>();
  b.y1 = j.at("y1").get<int>();
  b.z1 = j.at("z1").get<int>();
  return b;
}

nlohmann::ordered_json RigidParams::to_json() const {
  return nlohmann::ordered_json{{"rot_deg", rot_deg},
                                {"trans_vox", trans_vox},
                                {"converged", converged},
                                {"ncc", ncc}};
}

RigidParams RigidParams::from_json(const nlohmann::json& j) {
  RigidParams p;
  p.rot_deg = j.at("rot_deg").get<std::array<double, 3>>();
  p.trans_vox = j.at("trans_vox").get<std::array<double, 3>>();
  p.converged = j.value("converged", true);
  p.ncc = j.value("ncc", 0.0);
  return p;
}

void BiasOptions::validate() const {
  require(order >= 1 && order <= 4, "bias polynomial order must be 1 to 4");
  require(!work_dir.empty(), "bias work_dir must not be empty");
}

void RigidOptions::validate() const {
  require(init_trans_step > 0.0 && init_rot_step > 0.0 && tol_step > 0.0,
          "rigid step sizes must be positive");
  require(max_sweeps > 0, "rigid sweep cap must be positive");
  require(min_overlap > 0.0 && min_overlap <= 1.0,
          "rigid min_overlap must be in (0, 1]");
  require(sample_stride >= 1, "rigid sample stride must be at least 1");
}

nlohmann::ordered_json PreprocessReport::to_json() const {
  nlohmann::ordered_json js = nlohmann::ordered_json::array();
  for (const StepStatus& s : steps)
    js.push_back(nlohmann::ordered_json{
        {"name", s.name}, {"ok", s.ok}, {"detail", s.detail}});
  auto field_summary = [](const Volume& f) {
    if (f.data.size() == 0) return nlohmann::ordered_json{};
    float mn = f.data.data()[0], mx = mn;
    for (i64 i = 0; i < f.data.size(); ++i) {
      mn = std::min(mn, f.data.data()[i]);
      mx = std::max(mx, f.data.data()[i]);
    }
    return nlohmann::ordered_json{{"min", mn}, {"max", mx}};
  };
  i64 mask_voxels = 0;
  for (i64 i = 0; i < brain_mask.data.size(); ++i)
    mask_voxels += brain_mask.data.data()[i] != 0;
  return nlohmann::ordered_json{{"steps", js},
                                {"rigid", rigid.to_json()},
                                {"crop", crop.to_json()},
                                {"bias_field_t1", field_summary(bias_field_t1)},
                                {"bias_field_t2", field_summary(bias_field_t2)},
                                {"mask_voxels", mask_voxels}};
}

namespace {

/// Monomials u^a v^b w^c with a+b+c <= order, fixed enumeration order.
int basis_size(int order) {
  return (order + 1) * (order + 2) * (order + 3) / 6;
}

void eval_basis(double u, double v, double w, int order, double* out) {
  int idx = 0;
  for (int t = 0; t <= order; ++t)
    for (int a = t; a >= 0; --a)
      for (int b = t - a; b >= 0; --b) {
        const int c = t - a - b;
        out[idx++] = std::pow(u, a) * std::pow(v, b) * std::pow(w, c);
      }
}

/// In-place Cholesky solve of a symmetric positive-definite system. Retries
/// once with a small ridge before giving up.
std::vector<double> solve_spd(int n, std::vector<double> a,
                              std::vector<double> b) {
  const std::vector<double> a0 = a;
  for (int attempt = 0; attempt < 2; ++attempt) {
    if (attempt == 1) {
      a = a0;
      double trace = 0.0;
      for (int i = 0; i < n; ++i) trace += a[size_t(i * n + i)];
      for (int i = 0; i < n; ++i) a[size_t(i * n + i)] += 1e-9 * trace / n;
    }
    std::vector<double> l(size_t(n) * size_t(n), 0.0);
    bool ok = true;
    for (int i = 0; i < n && ok; ++i)
      for (int j = 0; j <= i && ok; ++j) {
        double s = a[size_t(i * n + j)];
        for (int k = 0; k < j; ++k)
          s -= l[size_t(i * n + k)] * l[size_t(j * n + k)];
        if (i == j) {
          if (s <= 0.0) {
            ok = false;
            break;
          }
          l[size_t(i * n + i)] = std::sqrt(s);
        } else {
          l[size_t(i * n + j)] = s / l[size_t(j * n + j)];
        }
      }
    if (!ok) continue;
    std::vector<double> x = b;
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < i; ++k)
        x[size_t(i)] -= l[size_t(i * n + k)] * x[size_t(k)];
      x[size_t(i)] /= l[size_t(i * n + i)];
    }
    for (int i = n - 1; i >= 0; --i) {
      for (int k = i + 1; k < n; ++k)
        x[size_t(i)] -= l[size_t(k * n + i)] * x[size_t(k)];
      x[size_t(i)] /= l[size_t(i * n + i)];
    }
    return x;
  }
  fail("bias polynomial fit is singular");
}

double norm_coord(int i, int n) {
  return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0;
}

void check_same_grid(const Volume& v, const LabelMap& mask,
                     const std::string& what) {
  require(v.data.dims() == mask.data.dims(), what + " grid mismatch");
}

std::pair<Volume, Volume> external_bias(const Volume& v, const LabelMap& mask,
                                        const BiasOptions& opt) {
  for (const char* ph : {"{in}", "{mask}", "{out}"})
    require(opt.external_cmd.find(ph) != std::string::npos,
            std::string("bias command template missing ") + ph +
                " placeholder");
  std::random_device rd;
  const fs::path dir = fs::path(opt.work_dir) /
                       ("iseg_bias_" + std::to_string(rd()));
  fs::create_directories(dir);
  const std::string in_p = (dir / "in.nii").string();
  const std::string mask_p = (dir / "mask.nii").string();
  const std::string out_p = (dir / "out.nii").string();
  vol::save_volume(v, in_p);
  vol::save_labels(mask, mask_p);
  std::string cmd = opt.external_cmd;
  auto sub = [&cmd](const std::string& key, const std::string& val) {
    for (size_t pos = cmd.find(key); pos != std::string::npos;
         pos = cmd.find(key))
      cmd.replace(pos, key.size(), val);
  };
  sub("{in}", in_p);
  sub("{mask}", mask_p);
  sub("{out}", out_p);
  const int rc = std::system(cmd.c_str());
  if (rc != 0 || !fs::exists(out_p)) {
    fs::remove_all(dir);
    fail("bias correction command failed (exit " + std::to_string(rc) +
         "): " + cmd);
  }
  Volume corrected = vol::load_volume(out_p);
  fs::remove_all(dir);
  require(corrected.data.dims() == v.data.dims(),
          "bias correction command changed the grid");

  // Derive a strictly positive field consistent with output = input/field
  // and renormalize it to unit in-mask mean.
  Volume field = v;
  field.modality = vol::Modality::synthetic;
  const i64 n = v.data.size();
  for (i64 i = 0; i < n; ++i) {
    const float num = v.data.data()[i];
    const float den = corrected.data.data()[i];
    float f = 1.0f;
    if (std::fabs(den) > 1e-6f && std::fabs(num) > 1e-6f) f = num / den;
    field.data.data()[i] = std::clamp(f, 0.05f, 20.0f);
  }
  double mean = 0.0;
  i64 cnt = 0;
  for (i64 i = 0; i < n; ++i)
    if (mask.data.data()[i] != 0) {
      mean += field.data.data()[i];
      ++cnt;
    }
  mean /= double(cnt);
  Volume out = v;
  for (i64 i = 0; i < n; ++i) {
    field.data.data()[i] = float(field.data.data()[i] / mean);
    out.data.data()[i] = v.data.data()[i] / field.data.data()[i];
  }
  return {std::move(out), std::move(field)};
}

}  // namespace

std::pair<Volume, Volume> correct_bias(const Volume& v, const LabelMap& mask,
                                       const BiasOptions& opt,
                                       std::string* warning) {
  opt.validate();
  check_same_grid(v, mask, "bias mask");
  const i64 n = v.data.size();
  i64 in_mask = 0;
  for (i64 i = 0; i < n; ++i) in_mask += mask.data.data()[i] != 0;
  require(in_mask > 0, "bias mask is empty");

  if (!opt.external_cmd.empty()) return external_bias(v, mask, opt);

  // Shift policy: the log-domain fit needs positive in-mask intensities.
  float mn = 0.0f, mx = 0.0f;
  bool first = true;
  for (i64 i = 0; i < n; ++i)
    if (mask.data.data()[i] != 0) {
      const float x = v.data.data()[i];
      mn = first ? x : std::min(mn, x);
      mx = first ? x : std::max(mx, x);
      first = false;
    }
  double shift = 0.0;
  if (mn <= 0.0f) {
    shift = -double(mn) + 1e-3 * std::max(double(mx - mn), 1.0);
    if (warning != nullptr)
      *warning = "nonpositive in-mask intensities; fitted after shifting by " +
                 std::to_string(shift);
  }

  const int m = basis_size(opt.order);
  std::vector<double> ata(size_t(m) * size_t(m), 0.0);
  std::vector<double> atb(size_t(m), 0.0);
  std::vector<double> basis(static_cast<size_t>(m));
  const int nx = v.nx(), ny = v.ny(), nz = v.nz();
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (mask.at(x, y, z) == 0) continue;
        eval_basis(norm_coord(x, nx), norm_coord(y, ny), norm_coord(z, nz),
                   opt.order, basis.data());
        const double t = std::log(double(v.at(x, y, z)) + shift);
        for (int i = 0; i < m; ++i) {
          atb[size_t(i)] += basis[size_t(i)] * t;
          for (int j = 0; j <= i; ++j)
            ata[size_t(i * m + j)] += basis[size_t(i)] * basis[size_t(j)];
        }
      }
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      ata[size_t(i * m + j)] = ata[size_t(j * m + i)];
  const std::vector<double> coeff = solve_spd(m, std::move(ata),
                                              std::move(atb));

  Volume field = v;
  field.modality = vol::Modality::synthetic;
  double mean = 0.0;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        eval_basis(norm_coord(x, nx), norm_coord(y, ny), norm_coord(z, nz),
                   opt.order, basis.data());
        double p = 0.0;
        for (int i = 0; i < m; ++i) p += coeff[size_t(i)] * basis[size_t(i)];
        const double f = std::exp(p);
        field.at(x, y, z) = float(f);
        if (mask.at(x, y, z) != 0) mean += f;
      }
  mean /= double(in_mask);

  Volume out = v;
  for (i64 i = 0; i < n; ++i) {
    field.data.data()[i] = float(field.data.data()[i] / mean);
    out.data.data()[i] = float((double(v.data.data()[i]) + shift) /
                                   field.data.data()[i] -
                               shift);
  }
  return {std::move(out), std::move(field)};
}

namespace {

/// Otsu threshold over a 256-bin histogram of [mn, mx].
float otsu_threshold(const TensorF& data, float mn, float mx) {
  constexpr int kBins = 256;
  std::array<i64, kBins> hist{};
  const double scale = (kBins - 1) / double(mx - mn);
  for (i64 i = 0; i < data.size(); ++i) {
    int b = int((data.data()[i] - mn) * scale);
    hist[size_t(std::clamp(b, 0, kBins - 1))]++;
  }
  const double total = double(data.size());
  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) sum_all += b * double(hist[size_t(b)]);
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int b = 0; b < kBins; ++b) {
    w0 += double(hist[size_t(b)]);
    if (w0 == 0.0) continue;
    const double w1 = total - w0;
    if (w1 == 0.0) break;
    sum0 += b * double(hist[size_t(b)]);
    const double m0 = sum0 / w0;
    const double m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  return mn + float((best_bin + 0.5) / scale);
}

void dilate_box(std::vector<std::uint8_t>& fg, int nx, int ny, int nz,
                bool erode) {
  const std::vector<std::uint8_t> src = fg;
  auto at = [&](int x, int y, int z) {
    return src[size_t((i64(z) * ny + y) * nx + x)];
  };
  i64 idx = 0;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x, ++idx) {
        std::uint8_t acc = erode ? 1 : 0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int xx = x + dx, yy = y + dy, zz = z + dz;
              std::uint8_t nb = 0;  // outside counts as background
              if (xx >= 0 && xx < nx && yy >= 0 && yy < ny && zz >= 0 &&
                  zz < nz)
                nb = at(xx, yy, zz);
              if (erode)
                acc = std::uint8_t(acc & nb);
              else
                acc = std::uint8_t(acc | nb);
            }
        fg[size_t(idx)] = acc;
      }
}

/// Keep only the largest 6-connected nonzero component.
void keep_largest_component(std::vector<std::uint8_t>& fg, int nx, int ny,
                            int nz) {
  const i64 n = i64(nx) * ny * nz;
  std::vector<int> comp(size_t(n), 0);
  int next = 0;
  i64 best_size = 0;
  int best_comp = 0;
  std::vector<i64> stack;
  for (i64 seed = 0; seed < n; ++seed) {
    if (fg[size_t(seed)] == 0 || comp[size_t(seed)] != 0) continue;
    const int id = ++next;
    i64 size = 0;
    stack.push_back(seed);
    comp[size_t(seed)] = id;
    while (!stack.empty()) {
      const i64 cur = stack.back();
      stack.pop_back();
      ++size;
      const int x = int(cur % nx), y = int((cur / nx) % ny),
                z = int(cur / (i64(nx) * ny));
      const int off[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                             {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
      for (const auto& o : off) {
        const int xx = x + o[0], yy = y + o[1], zz = z + o[2];
        if (xx < 0 || xx >= nx || yy < 0 || yy >= ny || zz < 0 || zz >= nz)
          continue;
        const i64 ni = (i64(zz) * ny + yy) * nx + xx;
        if (fg[size_t(ni)] != 0 && comp[size_t(ni)] == 0) {
          comp[size_t(ni)] = id;
          stack.push_back(ni);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_comp = id;
    }
  }
  for (i64 i = 0; i < n; ++i)
    fg[size_t(i)] = std::uint8_t(comp[size_t(i)] == best_comp && best_comp);
}

/// Set every background voxel not reachable from the grid border to one.
void fill_holes(std::vector<std::uint8_t>& fg, int nx, int ny, int nz) {
  const i64 n = i64(nx) * ny * nz;
  std::vector<std::uint8_t> outside(size_t(n), 0);
  std::vector<i64> stack;
  auto push = [&](int x, int y, int z) {
    const i64 i = (i64(z) * ny + y) * nx + x;
    if (fg[size_t(i)] == 0 && outside[size_t(i)] == 0) {
      outside[size_t(i)] = 1;
      stack.push_back(i);
    }
  };
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x)
        if (x == 0 || x == nx - 1 || y == 0 || y == ny - 1 || z == 0 ||
            z == nz - 1)
          push(x, y, z);
  while (!stack.empty()) {
    const i64 cur = stack.back();
    stack.pop_back();
    const int x = int(cur % nx), y = int((cur / nx) % ny),
              z = int(cur / (i64(nx) * ny));
    if (x > 0) push(x - 1, y, z);
    if (x < nx - 1) push(x + 1, y, z);
    if (y > 0) push(x, y - 1, z);
    if (y < ny - 1) push(x, y + 1, z);
    if (z > 0) push(x, y, z - 1);
    if (z < nz - 1) push(x, y, z + 1);
  }
  for (i64 i = 0; i < n; ++i)
    if (outside[size_t(i)] == 0) fg[size_t(i)] = 1;
}

}  // namespace

LabelMap strip_skull(const Volume& v) {
  const i64 n = v.data.size();
  require(n > 0, "no foreground");
  float mn = v.data.data()[0], mx = mn;
  for (i64 i = 0; i < n; ++i) {
    mn = std::min(mn, v.data.data()[i]);
    mx = std::max(mx, v.data.data()[i]);
  }
  require(mx > mn, "no foreground");
  const float thr = otsu_threshold(v.data, mn, mx);

  std::vector<std::uint8_t> fg(static_cast<size_t>(n));
  i64 count = 0;
  for (i64 i = 0; i < n; ++i) {
    fg[size_t(i)] = v.data.data()[i] > thr;
    count += fg[size_t(i)];
  }
  require(count > 0, "no foreground");

  dilate_box(fg, v.nx(), v.ny(), v.nz(), false);
  dilate_box(fg, v.nx(), v.ny(), v.nz(), true);
  keep_largest_component(fg, v.nx(), v.ny(), v.nz());
  fill_holes(fg, v.nx(), v.ny(), v.nz());

  LabelMap mask(v.data.dims(), v.spacing);
  mask.affine = v.affine;
  for (i64 i = 0; i < n; ++i) mask.data.data()[i] = fg[size_t(i)];
  return mask;
}

namespace {

Mat4 make_translation(double x, double y, double z) {
  Mat4 t = Mat4::identity();
  t.at(0, 3) = x;
  t.at(1, 3) = y;
  t.at(2, 3) = z;
  return t;
}

Mat4 rotation_matrix(const std::array<double, 3>& deg) {
  auto rad = [](double d) { return d * 3.14159265358979323846 / 180.0; };
  const double cx = std::cos(rad(deg[0])), sx = std::sin(rad(deg[0]));
  const double cy = std::cos(rad(deg[1])), sy = std::sin(rad(deg[1]));
  const double cz = std::cos(rad(deg[2])), sz = std::sin(rad(deg[2]));
  Mat4 rx = Mat4::identity(), ry = Mat4::identity(), rz = Mat4::identity();
  rx.at(1, 1) = cx;
  rx.at(1, 2) = -sx;
  rx.at(2, 1) = sx;
  rx.at(2, 2) = cx;
  ry.at(0, 0) = cy;
  ry.at(0, 2) = sy;
  ry.at(2, 0) = -sy;
  ry.at(2, 2) = cy;
  rz.at(0, 0) = cz;
  rz.at(0, 1) = -sz;
  rz.at(1, 0) = sz;
  rz.at(1, 1) = cz;
  return rz * ry * rx;
}

/// Voxel-to-voxel map from the fixed grid into the moving grid for the
/// given parameters: rotate about the fixed volume's world center, then
/// translate by the parameters scaled to millimetres.
Mat4 fixed_to_moving(const Volume& moving, const Volume& fixed,
                     const RigidParams& p) {
  const std::array<double, 3> center = fixed.affine.apply(
      (fixed.nx() - 1) / 2.0, (fixed.ny() - 1) / 2.0, (fixed.nz() - 1) / 2.0);
  const Mat4 world =
      make_translation(p.trans_vox[0] * fixed.spacing[0],
                       p.trans_vox[1] * fixed.spacing[1],
                       p.trans_vox[2] * fixed.spacing[2]) *
      make_translation(center[0], center[1], center[2]) *
      rotation_matrix(p.rot_deg) *
      make_translation(-center[0], -center[1], -center[2]);
  return moving.affine.inverse() * world * fixed.affine;
}

float sample_trilinear(const Volume& v, double x, double y, double z,
                       bool* inside) {
  const int nx = v.nx(), ny = v.ny(), nz = v.nz();
  if (x < 0.0 || y < 0.0 || z < 0.0 || x > nx - 1 || y > ny - 1 ||
      z > nz - 1) {
    *inside = false;
    return 0.0f;
  }
  *inside = true;
  const int x0 = std::min(int(x), nx - 2 < 0 ? 0 : nx - 2);
  const int y0 = std::min(int(y), ny - 2 < 0 ? 0 : ny - 2);
  const int z0 = std::min(int(z), nz - 2 < 0 ? 0 : nz - 2);
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  auto get = [&](int xx, int yy, int zz) {
    return double(v.at(std::min(xx, nx - 1), std::min(yy, ny - 1),
                       std::min(zz, nz - 1)));
  };
  const double c00 = get(x0, y0, z0) * (1 - fx) + get(x0 + 1, y0, z0) * fx;
  const double c10 =
      get(x0, y0 + 1, z0) * (1 - fx) + get(x0 + 1, y0 + 1, z0) * fx;
  const double c01 =
      get(x0, y0, z0 + 1) * (1 - fx) + get(x0 + 1, y0, z0 + 1) * fx;
  const double c11 =
      get(x0, y0 + 1, z0 + 1) * (1 - fx) + get(x0 + 1, y0 + 1, z0 + 1) * fx;
  return float((c00 * (1 - fy) + c10 * fy) * (1 - fz) +
               (c01 * (1 - fy) + c11 * fy) * fz);
}

/// Normalized cross correlation of fixed against the warped moving volume,
/// over in-bounds samples, optionally restricted to a fixed-grid mask.
/// Returns the signed value; -2 marks insufficient overlap.
double ncc_at(const Volume& moving, const Volume& fixed, const RigidParams& p,
              const RigidOptions& opt, const LabelMap* fixed_mask) {
  const Mat4 map = fixed_to_moving(moving, fixed, p);
  double sf = 0, sm = 0, sff = 0, smm = 0, sfm = 0;
  i64 cnt = 0, tried = 0;
  for (int z = 0; z < fixed.nz(); z += opt.sample_stride)
    for (int y = 0; y < fixed.ny(); y += opt.sample_stride)
      for (int x = 0; x < fixed.nx(); x += opt.sample_stride) {
        if (fixed_mask != nullptr && fixed_mask->at(x, y, z) == 0) continue;
        ++tried;
        const std::array<double, 3> q = map.apply(x, y, z);
        bool inside = false;
        const double mv =
            sample_trilinear(moving, q[0], q[1], q[2], &inside);
        if (!inside) continue;
        const double fv = fixed.at(x, y, z);
        sf += fv;
        sm += mv;
        sff += fv * fv;
        smm += mv * mv;
        sfm += fv * mv;
        ++cnt;
      }
  if (cnt < i64(opt.min_overlap * double(tried))) return -2.0;
  const double fb = sf / double(cnt), mb = sm / double(cnt);
  const double cov = sfm / double(cnt) - fb * mb;
  const double varf = std::max(0.0, sff / double(cnt) - fb * fb);
  const double varm = std::max(0.0, smm / double(cnt) - mb * mb);
  const double denom = std::sqrt(varf * varm);
  return denom < 1e-12 ? 0.0 : cov / denom;
}

}  // namespace

Volume rigid_resample(const Volume& moving, const Volume& fixed,
                      const RigidParams& params) {
  const Mat4 map = fixed_to_moving(moving, fixed, params);
  Volume out(fixed.data.dims(), fixed.spacing);
  out.affine = fixed.affine;
  out.modality = moving.modality;
  for (int z = 0; z < fixed.nz(); ++z)
    for (int y = 0; y < fixed.ny(); ++y)
      for (int x = 0; x < fixed.nx(); ++x) {
        const std::array<double, 3> q = map.apply(x, y, z);
        bool inside = false;
        out.at(x, y, z) = sample_trilinear(moving, q[0], q[1], q[2], &inside);
      }
  return out;
}

std::pair<Volume, RigidParams> rigid_align(const Volume& moving,
                                           const Volume& fixed,
                                           const RigidOptions& opt,
                                           const LabelMap* fixed_mask) {
  opt.validate();
  if (fixed_mask != nullptr)
    require(fixed.data.dims() == fixed_mask->data.dims(),
            "rigid mask grid mismatch");
  // The optimizer compares NCC magnitudes so that inverted-contrast pairs
  // (within-subject T1w vs T2w) still have their optimum at alignment; the
  // insufficient-overlap sentinel sorts below every real correlation.
  auto score = [](double ncc) { return ncc < -1.5 ? -1.0 : std::fabs(ncc); };
  RigidParams best;
  best.ncc = ncc_at(moving, fixed, best, opt, fixed_mask);
  double rot_step = opt.init_rot_step;
  double trans_step = opt.init_trans_step;
  bool converged = false;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    bool improved = false;
    for (int i = 0; i < 6; ++i) {
      const double step = i < 3 ? rot_step : trans_step;
      for (const double dir : {1.0, -1.0}) {
        RigidParams cand = best;
        if (i < 3)
          cand.rot_deg[size_t(i)] += dir * step;
        else
          cand.trans_vox[size_t(i - 3)] += dir * step;
        cand.ncc = ncc_at(moving, fixed, cand, opt, fixed_mask);
        if (score(cand.ncc) > score(best.ncc) + 1e-12) {
          best = cand;
          improved = true;
        }
      }
    }
    if (!improved) {
      rot_step *= 0.5;
      trans_step *= 0.5;
      if (rot_step < opt.tol_step && trans_step < opt.tol_step)
        converged = true;
    }
  }
  best.converged = converged;
  return {rigid_resample(moving, fixed, best), best};
}

CropBox mask_bounding_box(const LabelMap& mask, int margin) {
  require(margin >= 0, "crop margin must be nonnegative");
  const int nx = mask.nx(), ny = mask.ny(), nz = mask.nz();
  CropBox b{nx, ny, nz, -1, -1, -1};
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (mask.at(x, y, z) == 0) continue;
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.z0 = std::min(b.z0, z);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
        b.z1 = std::max(b.z1, z);
      }
  require(b.x1 >= 0, "empty mask");
  b.x0 = std::max(0, b.x0 - margin);
  b.y0 = std::max(0, b.y0 - margin);
  b.z0 = std::max(0, b.z0 - margin);
  b.x1 = std::min(nx, b.x1 + 1 + margin);
  b.y1 = std::min(ny, b.y1 + 1 + margin);
  b.z1 = std::min(nz, b.z1 + 1 + margin);
  return b;
}

namespace {

void check_box(const CropBox& b, int nx, int ny, int nz) {
  require(b.x0 >= 0 && b.y0 >= 0 && b.z0 >= 0 && b.x1 <= nx && b.y1 <= ny &&
              b.z1 <= nz && b.nx() > 0 && b.ny() > 0 && b.nz() > 0,
          "crop box out of range");
}

Mat4 shifted_affine(const Mat4& a, const CropBox& b) {
  return a * make_translation(b.x0, b.y0, b.z0);
}

}  // namespace

Volume crop(const Volume& v, const CropBox& box) {
  check_box(box, v.nx(), v.ny(), v.nz());
  Volume out(Dims3{box.nz(), box.ny(), box.nx()}, v.spacing);
  out.affine = shifted_affine(v.affine, box);
  out.modality = v.modality;
  for (int z = 0; z < box.nz(); ++z)
    for (int y = 0; y < box.ny(); ++y)
      for (int x = 0; x < box.nx(); ++x)
        out.at(x, y, z) = v.at(box.x0 + x, box.y0 + y, box.z0 + z);
  return out;
}

LabelMap crop_labels(const LabelMap& lm, const CropBox& box) {
  check_box(box, lm.nx(), lm.ny(), lm.nz());
  LabelMap out(Dims3{box.nz(), box.ny(), box.nx()}, lm.spacing);
  out.affine = shifted_affine(lm.affine, box);
  for (int z = 0; z < box.nz(); ++z)
    for (int y = 0; y < box.ny(); ++y)
      for (int x = 0; x < box.nx(); ++x)
        out.at(x, y, z) = lm.at(box.x0 + x, box.y0 + y, box.z0 + z);
  return out;
}

void paste(const Volume& patch, const CropBox& box, Volume& into) {
  check_box(box, into.nx(), into.ny(), into.nz());
  require(patch.nx() == box.nx() && patch.ny() == box.ny() &&
              patch.nz() == box.nz(),
          "paste box mismatch");
  for (int z = 0; z < box.nz(); ++z)
    for (int y = 0; y < box.ny(); ++y)
      for (int x = 0; x < box.nx(); ++x)
        into.at(box.x0 + x, box.y0 + y, box.z0 + z) = patch.at(x, y, z);
}

Volume crop_to_mask(const Volume& v, const LabelMap& mask, int margin) {
  check_same_grid(v, mask, "crop mask");
  return crop(v, mask_bounding_box(mask, margin));
}

PreprocessResult preprocess_pair(const Volume& t1, const Volume& t2,
                                 const PreprocessOptions& opt) {
  PreprocessResult r;
  auto step = [&r](const std::string& name, bool ok,
                   const std::string& detail) {
    r.report.steps.push_back(StepStatus{name, ok, detail});
  };

  const LabelMap mask1 = strip_skull(t1);
  step("strip_t1", true, "");
  LabelMap mask2 = strip_skull(t2);
  step("strip_t2", true, "");

  std::string warn;
  auto [t1c, field1] = correct_bias(t1, mask1, opt.bias, &warn);
  r.report.bias_field_t1 = std::move(field1);
  step("bias_t1", true, warn);
  warn.clear();
  auto [t2c, field2] = correct_bias(t2, mask2, opt.bias, &warn);
  r.report.bias_field_t2 = std::move(field2);
  step("bias_t2", true, warn);

  auto [t1a, rigid] = rigid_align(t1c, t2c, opt.rigid, &mask2);
  r.report.rigid = rigid;
  step("align_t1_to_t2", rigid.converged,
       "ncc " + std::to_string(rigid.ncc));

  r.report.brain_mask = mask2;
  r.report.crop = mask_bounding_box(mask2, opt.crop_margin);
  r.t1 = crop(t1a, r.report.crop);
  r.t2 = crop(t2c, r.report.crop);
  r.mask = crop_labels(mask2, r.report.crop);
  step("crop", true,
       std::to_string(r.report.crop.nx()) + "x" +
           std::to_string(r.report.crop.ny()) + "x" +
           std::to_string(r.report.crop.nz()));

  if (opt.target_spacing) {
    r.t1 = vol::resample(r.t1, *opt.target_spacing, vol::Interp::trilinear);
    r.t2 = vol::resample(r.t2, *opt.target_spacing, vol::Interp::trilinear);
    r.mask = vol::resample_labels(r.mask, *opt.target_spacing);
    step("resample", true, "");
  }
  return r;
}

}  // namespace iseg::prep
