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

#include "iseg/nets/bundle.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace iseg::nets {

namespace {

// The on-disk format is little-endian; so is every target this builds on.
static_assert(std::endian::native == std::endian::little,
              "bundle I/O assumes a little-endian host");

constexpr char kMagic[8] = {'I', 'S', 'E', 'G', 'M', 'D', 'L', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagAdam = 1u << 0;

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

void put_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

void put_f32s(std::ostream& os, const float* p, i64 n) {
  os.write(reinterpret_cast<const char*>(p), std::streamsize(n) * 4);
}

struct Reader {
  std::ifstream f;
  std::string path;

  void read(void* dst, std::streamsize n) {
    f.read(reinterpret_cast<char*>(dst), n);
    require(f.gcount() == n, "truncated bundle: " + path);
  }

  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
  }

  std::uint64_t u64() {
    std::uint64_t v;
    read(&v, 8);
    return v;
  }

  std::int32_t i32() {
    std::int32_t v;
    read(&v, 4);
    return v;
  }

  std::string str(std::uint32_t len) {
    std::string s(len, '\0');
    if (len > 0) read(s.data(), std::streamsize(len));
    return s;
  }

  void f32s(float* p, i64 n) { read(p, std::streamsize(n) * 4); }

  bool at_eof() {
    f.peek();
    return f.eof();
  }
};

BundleInfo read_header(Reader& r) {
  char magic[8];
  r.read(magic, 8);
  require(std::memcmp(magic, kMagic, 8) == 0,
          "not a model bundle: " + r.path);
  const std::uint32_t version = r.u32();
  require(version == kVersion,
          "unsupported bundle version " + std::to_string(version) + ": " +
              r.path);
  BundleInfo info;
  const std::uint32_t flags = r.u32();
  info.has_opt_state = (flags & kFlagAdam) != 0;
  info.step_count = int(r.u64());
  const std::string hdr = r.str(r.u32());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(hdr);
  } catch (const nlohmann::json::exception& e) {
    fail("bad bundle header JSON in " + r.path + ": " + e.what());
  }
  info.kind = j.at("kind").get<std::string>();
  info.stage = j.at("stage").get<std::string>();
  info.config = j.at("config");
  return info;
}

}  // namespace

void save_bundle(const std::string& path, const std::string& kind,
                 const nlohmann::json& config, const std::string& stage,
                 const ParamSet<float>& params, const AdamOpt* opt) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "cannot write bundle: " + path);
  f.write(kMagic, 8);
  put_u32(f, kVersion);
  put_u32(f, opt != nullptr ? kFlagAdam : 0u);
  put_u64(f, std::uint64_t(opt != nullptr ? opt->step_count : 0));
  nlohmann::ordered_json hdr;
  hdr["kind"] = kind;
  hdr["stage"] = stage;
  hdr["config"] = config;
  const std::string hs = hdr.dump();
  put_u32(f, std::uint32_t(hs.size()));
  f.write(hs.data(), std::streamsize(hs.size()));
  put_u32(f, std::uint32_t(params.items().size()));
  for (const auto& [name, p] : params.items()) {
    put_u32(f, std::uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    put_i32(f, p.w.c());
    put_i32(f, p.w.d());
    put_i32(f, p.w.h());
    put_i32(f, p.w.w());
    put_f32s(f, p.w.data(), p.w.size());
    if (opt != nullptr) {
      require(p.m.size() == p.w.size() && p.v.size() == p.w.size(),
              "optimizer state not initialized for parameter " + name);
      put_f32s(f, p.m.data(), p.m.size());
      put_f32s(f, p.v.data(), p.v.size());
    }
  }
  f.flush();
  require(f.good(), "write failed for bundle: " + path);
}

BundleInfo peek_bundle(const std::string& path) {
  Reader r{std::ifstream(path, std::ios::binary), path};
  require(r.f.good(), "cannot open bundle: " + path);
  return read_header(r);
}

BundleInfo load_bundle(const std::string& path, const std::string& expect_kind,
                       const nlohmann::json& expect_config,
                       ParamSet<float>& params, AdamOpt* opt) {
  Reader r{std::ifstream(path, std::ios::binary), path};
  require(r.f.good(), "cannot open bundle: " + path);
  const BundleInfo info = read_header(r);
  require(info.kind == expect_kind, "bundle kind mismatch: file holds \"" +
                                        info.kind + "\", expected \"" +
                                        expect_kind + "\": " + path);
  require(info.config == expect_config,
          "bundle config mismatch for " + path + ": file holds " +
              info.config.dump() + ", expected " + expect_config.dump());
  require(opt == nullptr || info.has_opt_state,
          "bundle has no optimizer state: " + path);

  const std::uint32_t n = r.u32();
  require(n == params.items().size(),
          "bundle parameter count mismatch: " + path);
  for (auto& [name, p] : params.items()) {
    const std::string fname = r.str(r.u32());
    require(fname == name, "bundle parameter order mismatch: file holds \"" +
                               fname + "\", expected \"" + name +
                               "\": " + path);
    const int c = r.i32(), d = r.i32(), h = r.i32(), w = r.i32();
    require(c == p.w.c() && Dims3{d, h, w} == p.w.dims(),
            "bundle parameter shape mismatch for " + name + ": " + path);
    r.f32s(p.w.data(), p.w.size());
    if (info.has_opt_state) {
      if (p.m.size() != p.w.size()) {
        p.m = Tensor<float>::zeros_like(p.w);
        p.v = Tensor<float>::zeros_like(p.w);
      }
      r.f32s(p.m.data(), p.m.size());
      r.f32s(p.v.data(), p.v.size());
    }
  }
  require(r.at_eof(), "trailing bytes in bundle: " + path);
  if (opt != nullptr) opt->step_count = info.step_count;
  return info;
}

}  // namespace iseg::nets
