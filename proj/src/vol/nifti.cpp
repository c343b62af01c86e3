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

#include "iseg/vol/nifti.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "json.hpp"

namespace iseg::vol {
namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration, toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must pack to 348");

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtInt32 = 8;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;
constexpr std::int16_t kDtInt8 = 256;
constexpr std::int16_t kDtUint16 = 512;
constexpr std::int16_t kIntentVector = 1007;

template <class T>
void bswap(T& v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  v = std::bit_cast<T>(bytes);
}

void bswap_header(Nifti1Header& h) {
  bswap(h.sizeof_hdr);
  bswap(h.extents);
  bswap(h.session_error);
  for (auto& d : h.dim) bswap(d);
  bswap(h.intent_p1);
  bswap(h.intent_p2);
  bswap(h.intent_p3);
  bswap(h.intent_code);
  bswap(h.datatype);
  bswap(h.bitpix);
  bswap(h.slice_start);
  for (auto& p : h.pixdim) bswap(p);
  bswap(h.vox_offset);
  bswap(h.scl_slope);
  bswap(h.scl_inter);
  bswap(h.slice_end);
  bswap(h.cal_max);
  bswap(h.cal_min);
  bswap(h.slice_duration);
  bswap(h.toffset);
  bswap(h.glmax);
  bswap(h.glmin);
  bswap(h.qform_code);
  bswap(h.sform_code);
  bswap(h.quatern_b);
  bswap(h.quatern_c);
  bswap(h.quatern_d);
  bswap(h.qoffset_x);
  bswap(h.qoffset_y);
  bswap(h.qoffset_z);
  for (auto& v : h.srow_x) bswap(v);
  for (auto& v : h.srow_y) bswap(v);
  for (auto& v : h.srow_z) bswap(v);
}

class GzReader {
 public:
  explicit GzReader(const std::string& path) {
    require(std::filesystem::exists(path), "file not found: " + path);
    f_ = gzopen(path.c_str(), "rb");
    require(f_ != nullptr, "cannot open: " + path);
    path_ = path;
  }
  ~GzReader() {
    if (f_) gzclose(f_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read(void* dst, i64 n) {
    const int got = gzread(f_, dst, unsigned(n));
    require(got == int(n), "truncated NIfTI file: " + path_);
  }
  void skip(i64 n) {
    std::vector<char> junk(size_t(std::min<i64>(n, 4096)));
    while (n > 0) {
      const i64 chunk = std::min<i64>(n, i64(junk.size()));
      read(junk.data(), chunk);
      n -= chunk;
    }
  }

 private:
  gzFile f_ = nullptr;
  std::string path_;
};

struct RawImage {
  Dims3 dims{};
  int nchan = 1;  // dim[5] vector components (1 for plain volumes)
  std::array<double, 3> spacing{};
  Mat4 affine;
  std::vector<float> data;  // scaled, native order, [chan][z][y][x]
  std::int16_t datatype = 0;
  std::int16_t intent_code = 0;
  float scl_slope = 0.0f, scl_inter = 0.0f;
};

Mat4 affine_from_header(const Nifti1Header& h) {
  if (h.sform_code > 0) {
    Mat4 a;
    for (int j = 0; j < 4; ++j) {
      a.at(0, j) = h.srow_x[j];
      a.at(1, j) = h.srow_y[j];
      a.at(2, j) = h.srow_z[j];
    }
    a.at(3, 3) = 1.0;
    return a;
  }
  if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    const double a2 = 1.0 - (b * b + c * c + d * d);
    const double a = a2 > 0.0 ? std::sqrt(a2) : 0.0;
    const double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
    const double r[3][3] = {
        {a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d,
         2 * b * d + 2 * a * c},
        {2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d,
         2 * c * d - 2 * a * b},
        {2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b,
         a * a + d * d - b * b - c * c}};
    Mat4 m;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = h.pixdim[j + 1];
        if (j == 2) s *= qfac;
        m.at(i, j) = r[i][j] * s;
      }
    m.at(0, 3) = h.qoffset_x;
    m.at(1, 3) = h.qoffset_y;
    m.at(2, 3) = h.qoffset_z;
    m.at(3, 3) = 1.0;
    return m;
  }
  return Mat4::scaling(h.pixdim[1], h.pixdim[2], h.pixdim[3]);
}

template <class T>
void convert_data(const std::vector<char>& raw, bool swap,
                  std::vector<float>& out) {
  const i64 n = i64(raw.size() / sizeof(T));
  out.resize(size_t(n));
  const char* p = raw.data();
  for (i64 i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, p + i * i64(sizeof(T)), sizeof(T));
    if (swap && sizeof(T) > 1) bswap(v);
    out[size_t(i)] = float(v);
  }
}

RawImage read_nifti(const std::string& path) {
  GzReader in(path);
  Nifti1Header h{};
  in.read(&h, sizeof(h));

  bool swap = false;
  if (h.sizeof_hdr != 348) {
    bswap_header(h);
    require(h.sizeof_hdr == 348, "not a NIfTI-1 file: " + path);
    swap = true;
  }
  require(std::memcmp(h.magic, "n+1", 4) == 0,
          "only single-file NIfTI-1 (magic n+1) is supported: " + path);

  require(h.dim[0] >= 1 && h.dim[0] <= 7, "bad dim[0]: " + path);
  for (int i = 1; i <= h.dim[0]; ++i)
    require(h.dim[i] >= 1, "nonpositive dimension in header: " + path);

  RawImage img;
  img.dims = Dims3{h.dim[0] >= 3 ? h.dim[3] : 1, h.dim[0] >= 2 ? h.dim[2] : 1,
                   h.dim[1]};
  const int nt = h.dim[0] >= 4 ? h.dim[4] : 1;
  img.nchan = h.dim[0] >= 5 ? h.dim[5] : 1;
  require(nt == 1, "time-series NIfTI input is not supported: " + path);
  for (int i = 6; i <= h.dim[0]; ++i)
    require(h.dim[i] == 1, "more than 5 used dimensions: " + path);

  img.datatype = h.datatype;
  img.intent_code = h.intent_code;
  img.scl_slope = h.scl_slope;
  img.scl_inter = h.scl_inter;
  for (int a = 0; a < 3; ++a) {
    img.spacing[size_t(a)] = h.pixdim[a + 1];
    require(img.spacing[size_t(a)] > 0.0,
            "nonpositive voxel spacing in header: " + path);
  }
  img.affine = affine_from_header(h);
  require(img.affine.invertible(), "non-invertible affine: " + path);

  int elem = 0;
  switch (h.datatype) {
    case kDtUint8:
    case kDtInt8: elem = 1; break;
    case kDtInt16:
    case kDtUint16: elem = 2; break;
    case kDtInt32:
    case kDtFloat32: elem = 4; break;
    case kDtFloat64: elem = 8; break;
    default:
      fail("unsupported NIfTI datatype " + std::to_string(h.datatype) + ": " +
           path);
  }

  const i64 offset = i64(h.vox_offset);
  require(offset >= 348, "bad vox_offset: " + path);
  in.skip(offset - 348);

  const i64 nvox = img.dims.voxels() * img.nchan;
  std::vector<char> raw(size_t(nvox * elem));
  in.read(raw.data(), i64(raw.size()));

  switch (h.datatype) {
    case kDtUint8: convert_data<std::uint8_t>(raw, swap, img.data); break;
    case kDtInt8: convert_data<std::int8_t>(raw, swap, img.data); break;
    case kDtInt16: convert_data<std::int16_t>(raw, swap, img.data); break;
    case kDtUint16: convert_data<std::uint16_t>(raw, swap, img.data); break;
    case kDtInt32: convert_data<std::int32_t>(raw, swap, img.data); break;
    case kDtFloat32: convert_data<float>(raw, swap, img.data); break;
    case kDtFloat64: convert_data<double>(raw, swap, img.data); break;
    default: fail("unreachable datatype");
  }

  const bool scaled = h.scl_slope != 0.0f &&
                      !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);
  if (scaled)
    for (float& v : img.data) v = v * h.scl_slope + h.scl_inter;
  return img;
}

void write_bytes(const std::string& path, const Nifti1Header& h,
                 const void* data, i64 nbytes) {
  const char pad[4] = {0, 0, 0, 0};
  if (path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0) {
    gzFile f = gzopen(path.c_str(), "wb6");
    require(f != nullptr, "cannot write: " + path);
    bool ok = gzwrite(f, &h, sizeof(h)) == int(sizeof(h)) &&
              gzwrite(f, pad, 4) == 4 &&
              gzwrite(f, data, unsigned(nbytes)) == int(nbytes);
    ok = gzclose(f) == Z_OK && ok;
    require(ok, "write failed: " + path);
  } else {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "cannot write: " + path);
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
    f.write(pad, 4);
    f.write(reinterpret_cast<const char*>(data), nbytes);
    require(f.good(), "write failed: " + path);
  }
}

Nifti1Header make_header(Dims3 dims, int nchan,
                         const std::array<double, 3>& spacing,
                         const Mat4& affine, std::int16_t datatype,
                         std::int16_t bitpix) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  if (nchan == 1) {
    h.dim[0] = 3;
    h.dim[1] = std::int16_t(dims.w);
    h.dim[2] = std::int16_t(dims.h);
    h.dim[3] = std::int16_t(dims.d);
    h.dim[4] = h.dim[5] = h.dim[6] = h.dim[7] = 1;
  } else {
    h.dim[0] = 5;
    h.dim[1] = std::int16_t(dims.w);
    h.dim[2] = std::int16_t(dims.h);
    h.dim[3] = std::int16_t(dims.d);
    h.dim[4] = 1;
    h.dim[5] = std::int16_t(nchan);
    h.dim[6] = h.dim[7] = 1;
    h.intent_code = kIntentVector;
  }
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = float(spacing[size_t(a)]);
  for (int a = 4; a < 8; ++a) h.pixdim[a] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // millimetres
  std::snprintf(h.descrip, sizeof(h.descrip), "isoseg");
  h.sform_code = 1;
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = float(affine.at(0, j));
    h.srow_y[j] = float(affine.at(1, j));
    h.srow_z[j] = float(affine.at(2, j));
  }
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

void check_dims_fit(Dims3 d) {
  require(d.w <= 32767 && d.h <= 32767 && d.d <= 32767,
          "volume too large for NIfTI-1 dims");
}

}  // namespace

Volume load_volume(const std::string& path, bool reorient) {
  RawImage img = read_nifti(path);
  require(img.nchan == 1,
          "expected a 3D single-channel image, got " +
              std::to_string(img.nchan) + " components: " + path);
  for (float v : img.data)
    require(std::isfinite(v), "non-finite intensities: " + path);

  Volume v;
  v.data = TensorF(1, img.dims);
  std::memcpy(v.data.data(), img.data.data(), img.data.size() * sizeof(float));
  v.spacing = img.spacing;
  v.affine = img.affine;
  return reorient ? reorient_to_ras(v) : v;
}

void save_volume(const Volume& v, const std::string& path) {
  require(v.data.c() == 1, "save_volume: expected single channel");
  require(v.data.all_finite(), "save_volume: non-finite intensities");
  require(v.affine.invertible(), "save_volume: non-invertible affine");
  check_dims_fit(v.data.dims());
  const Nifti1Header h =
      make_header(v.data.dims(), 1, v.spacing, v.affine, kDtFloat32, 32);
  write_bytes(path, h, v.data.data(), v.data.size() * i64(sizeof(float)));
}

LabelMap load_labels(const std::string& path) {
  RawImage img = read_nifti(path);
  require(img.nchan == 1,
          "expected a 3D single-channel label map: " + path);
  const bool scaled = img.scl_slope != 0.0f &&
                      !(img.scl_slope == 1.0f && img.scl_inter == 0.0f);
  require(!scaled, "label maps must not carry intensity scaling: " + path);

  LabelMap lm;
  lm.data = Tensor<std::uint8_t>(1, img.dims);
  lm.spacing = img.spacing;
  lm.affine = img.affine;
  for (i64 i = 0; i < lm.data.size(); ++i) {
    const float v = img.data[size_t(i)];
    require(v == std::floor(v) && v >= 0.0f && v < float(kNumLabels),
            "label code out of range 0..8: " + path);
    lm.data.data()[i] = std::uint8_t(v);
  }
  return lm;
}

void save_labels(const LabelMap& lm, const std::string& path) {
  require(lm.data.c() == 1, "save_labels: expected single channel");
  require(lm.affine.invertible(), "save_labels: non-invertible affine");
  for (i64 i = 0; i < lm.data.size(); ++i)
    require(lm.data.data()[i] < kNumLabels, "save_labels: code out of range");
  check_dims_fit(lm.data.dims());
  const Nifti1Header h =
      make_header(lm.data.dims(), 1, lm.spacing, lm.affine, kDtUint8, 8);
  write_bytes(path, h, lm.data.data(), lm.data.size());

  const auto dir = std::filesystem::path(path).parent_path();
  write_label_legend(
      ((dir.empty() ? std::filesystem::path(".") : dir) / "labels.json")
          .string());
}

Field load_field(const std::string& path) {
  RawImage img = read_nifti(path);
  require(img.nchan == 3,
          "expected a 3-component displacement field: " + path);
  for (float v : img.data)
    require(std::isfinite(v), "non-finite displacements: " + path);

  Field f;
  f.data = TensorF(3, img.dims);
  std::memcpy(f.data.data(), img.data.data(), img.data.size() * sizeof(float));
  f.spacing = img.spacing;
  f.affine = img.affine;
  return f;
}

void save_field(const Field& f, const std::string& path) {
  require(f.data.c() == 3, "save_field: expected three channels");
  require(f.data.all_finite(), "save_field: non-finite displacements");
  check_dims_fit(f.data.dims());
  const Nifti1Header h =
      make_header(f.data.dims(), 3, f.spacing, f.affine, kDtFloat32, 32);
  write_bytes(path, h, f.data.data(), f.data.size() * i64(sizeof(float)));
}

void write_label_legend(const std::string& json_path) {
  nlohmann::ordered_json j;
  for (int i = 0; i < kNumLabels; ++i) j[std::to_string(i)] = tissue_name(i);
  std::ofstream f(json_path, std::ios::trunc);
  require(f.good(), "cannot write: " + json_path);
  f << j.dump(2) << "\n";
  require(f.good(), "write failed: " + json_path);
}

}  // namespace iseg::vol
