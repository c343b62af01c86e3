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

// Model bundle files: a self-describing container for one model's weights,
// optionally with Adam state so training resumes bit-exactly.
//
// Layout (little-endian):
//   magic "ISEGMDL1", u32 version (1), u32 flags (bit 0: Adam state),
//   u64 step_count, u32 json length + JSON header bytes
//     ({"kind": ..., "stage": ..., "config": {...}}),
//   u32 parameter count, then per parameter in creation order:
//     u32 name length + name bytes, i32 c/d/h/w, c*d*h*w f32 weights,
//     and with the Adam flag the same count of f32 m then v.
//
// Loading refuses mismatched kind or config rather than reinterpreting
// weights for the wrong architecture.

#pragma once

#include <string>

#include "iseg/nets/params.hpp"
#include "json.hpp"

namespace iseg::nets {

struct BundleInfo {
  std::string kind;       // model family, e.g. "segmenter"
  std::string stage;      // free-form caller tag, e.g. "p2.gen_ab"
  nlohmann::json config;  // model config echo
  int step_count = 0;
  bool has_opt_state = false;
};

/// Write params (and opt state when given) under the kind/config/stage tags.
void save_bundle(const std::string& path, const std::string& kind,
                 const nlohmann::json& config, const std::string& stage,
                 const ParamSet<float>& params, const AdamOpt* opt = nullptr);

/// Read only the header, without touching any parameter payload.
BundleInfo peek_bundle(const std::string& path);

/// Load weights into params, which must already hold the architecture's
/// tensors; kind, config, parameter names and shapes must all match.
/// When opt is given the bundle must carry Adam state, which is restored
/// along with step_count. Returns the header.
BundleInfo load_bundle(const std::string& path, const std::string& expect_kind,
                       const nlohmann::json& expect_config,
                       ParamSet<float>& params, AdamOpt* opt = nullptr);

}  // namespace iseg::nets
