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

#include "iseg/metrics/png.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "iseg/core/common.hpp"

namespace iseg::metrics {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
  put_u32(out, std::uint32_t(payload.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + crc_start, uInt(out.size() - crc_start));
  put_u32(out, std::uint32_t(crc));
}

}  // namespace

void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& rgb) {
  require(width > 0 && height > 0, "png dimensions must be positive");
  require(rgb.size() == size_t(width) * size_t(height) * 3,
          "png pixel buffer size mismatch");

  // One filter byte (0 = none) in front of every scanline.
  const size_t stride = size_t(width) * 3;
  std::vector<std::uint8_t> raw((stride + 1) * size_t(height));
  for (int y = 0; y < height; ++y) {
    raw[size_t(y) * (stride + 1)] = 0;
    std::memcpy(raw.data() + size_t(y) * (stride + 1) + 1,
                rgb.data() + size_t(y) * stride, stride);
  }

  uLongf comp_size = compressBound(uLong(raw.size()));
  std::vector<std::uint8_t> comp(comp_size);
  require(compress2(comp.data(), &comp_size, raw.data(), uLong(raw.size()),
                    Z_DEFAULT_COMPRESSION) == Z_OK,
          "png deflate failed");
  comp.resize(comp_size);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a,
                                   '\n'};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, std::uint32_t(width));
  put_u32(ihdr, std::uint32_t(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", comp);
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          std::streamsize(out.size()));
  require(f.good(), "short write: " + path);
}

}  // namespace iseg::metrics
