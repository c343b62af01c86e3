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

#pragma once

#include <string>

#include "iseg/vol/volume.hpp"

// Single-file NIfTI-1 I/O (.nii and .nii.gz). Intensities are stored as
// float32, labels as uint8, displacement fields as 5D float32 with dim[5]=3
// and the vector intent code. Readers accept the common integer and float
// datatypes, apply scl scaling, and handle byte-swapped (opposite-endian)
// files; writers always emit native-endian sform files.
namespace iseg::vol {

/// Throws on missing files, 4D/multi-channel data, non-finite intensities,
/// and non-invertible affines.
Volume load_volume(const std::string& path, bool reorient = false);
void save_volume(const Volume& v, const std::string& path);

/// Label codes are validated to lie in 0..8.
LabelMap load_labels(const std::string& path);
/// Also writes a `labels.json` legend next to the output file.
void save_labels(const LabelMap& lm, const std::string& path);

Field load_field(const std::string& path);
void save_field(const Field& f, const std::string& path);

/// Code -> display-name legend for the 9 tissue labels.
void write_label_legend(const std::string& json_path);

}  // namespace iseg::vol
