// Copyright 2026 The ddetr Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ddetr/kernels.hpp"
#include "ddetr/loss.hpp"

namespace ddetr {

enum class ShapeClass { Rectangle = 0, Ellipse = 1, Triangle = 2 };
inline constexpr int kNumShapeClasses = 3;

/// Synthetic scene generator settings. Sizes are in pixels.
struct SceneSpec {
  int image_size = 64;
  int min_objects = 0;
  int max_objects = 3;
  int min_size = 6;
  int max_size = 32;
  double noise = 0.03;        // std-dev of additive pixel noise, intensities in [0, 1]
  double color_jitter = 0.15; // per-channel jitter around each class's base color
  std::uint64_t seed = 0;

  void validate() const;
};

/// Pixels are stored CHW as 8-bit intensities.
struct Sample {
  std::vector<std::uint8_t> pixels;
  std::vector<GroundTruthBox> labels;

  FeatureMap image(int size) const;
};

struct Dataset {
  SceneSpec spec;
  std::vector<Sample> samples;

  int image_size() const { return spec.image_size; }
  std::size_t size() const { return samples.size(); }
};

/// Objects never overlap (one pixel gap), so each label is the exact extent of its
/// rasterized mask. Throws std::invalid_argument for an infeasible spec.
Dataset gen_dataset(const SceneSpec& spec, int n_images);

/// Writes manifest.json, images.bin and labels.jsonl into `dir` (created if needed).
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Inside-test for one pixel center of a shape occupying [x0, x0+w) x [y0, y0+h).
bool shape_covers(ShapeClass shape, int x0, int y0, int w, int h, int px, int py);

}  // namespace ddetr
