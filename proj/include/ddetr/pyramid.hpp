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

#include <vector>

#include "ddetr/attention.hpp"
#include "ddetr/layers.hpp"

namespace ddetr {

struct FeaturePyramid {
  std::vector<FeatureMap> levels;
  std::vector<int> strides;  // relative to the input image

  int num_levels() const { return static_cast<int>(levels.size()); }
  std::vector<LevelShape> shapes() const;
  FlatFeatures flatten() const;
};

/// Small convolutional backbone standing in for ResNet C3-C5.
///
/// Two stride-2 convolutions bring the image to stride 4, then up to three stride-2
/// stages give strides 8, 16 and 32. Each stage output is projected to C channels by a
/// 1x1 convolution. Levels past the third come from 3x3 stride-2 convolutions, the
/// first applied to the last stage and later ones to the previous extra level.
/// `first_stage` skips the finest stages as outputs (they still run); with
/// first_stage = 2 and one level only the stride-32 stage is returned.
struct StemParams {
  Conv2d conv0;
  Conv2d conv1;
  std::vector<Conv2d> stages;
  std::vector<Linear> input_proj;  // 1x1 convolutions on output stages, finest first
  std::vector<Conv2d> extra;       // stride-2 levels beyond the stages

  int channels = 0;
  int levels = 0;
  int first_stage = 0;

  static StemParams init(int width, int channels, int levels, Rng& rng, int first_stage = 0);
  /// Backbone stages that feed a pyramid level directly.
  static int output_stages(int levels, int first_stage) { return levels < 3 - first_stage ? levels : 3 - first_stage; }
  /// Spatial stride the input size must divide.
  int required_divisor() const;
  void collect(ParamList& out, const std::string& prefix);
};

struct PyramidCache {
  Conv2d::Cache conv0;
  Conv2d::Cache conv1;
  std::vector<Conv2d::Cache> stages;
  std::vector<Mat> conv0_out;  // post-ReLU activations, index 0: conv0, 1: conv1
  std::vector<Mat> stage_out;  // post-ReLU stage outputs (token-major)
  std::vector<LevelShape> stage_shapes;
  std::vector<Conv2d::Cache> extra;
};

/// `image` is a 3-channel FeatureMap. Throws when H or W is not divisible by the stem stride.
FeaturePyramid build_pyramid(const FeatureMap& image, const StemParams& stem, PyramidCache* cache = nullptr,
                             MacCounter* macs = nullptr);

/// Accumulates stem gradients given d/d(level tokens), one [H_l W_l, C] matrix per level.
void build_pyramid_backward(StemParams& stem, const PyramidCache& cache, const std::vector<Mat>& d_levels);

/// Normalized coordinate of pixel index i along an axis of n pixels; 0.5 when n == 1.
double pixel_to_normalized(int i, int n);

/// Sine/cosine embedding of a normalized point into `channels` values: the first half
/// encodes y, the second half x, each as interleaved (sin, cos) pairs with temperature
/// 10000 over the coordinate scaled by 2*pi.
void sine_embed_point(double x, double y, int channels, double* out);

/// [C, H*W] positional embedding of every pixel, via its normalized coordinates.
/// Throws for odd C.
Mat sine_positional_embedding(int height, int width, int channels);

/// Per-token positional embedding plus the level's scale embedding: [sum H_l W_l, C].
Mat level_position_tokens(std::span<const LevelShape> shapes, const Mat& scale_embeddings);

struct AttachedPyramid {
  FlatFeatures values;  // raw x, used for the value projection
  Mat keys;             // x + pos + e_l
};

/// `positional` holds one [C, H_l W_l] map per level; `scale_embeddings` is [L, C].
AttachedPyramid attach_embeddings(const FeaturePyramid& pyramid, const std::vector<Mat>& positional,
                                  const Mat& scale_embeddings);

/// phi_l: normalized [0,1]^2 to pixel coordinates of a level; throws outside [0,1]^2.
Point2 rescale_reference(Point2 normalized, LevelShape level);

/// Each token's own normalized location, level-major: [sum H_l W_l, 2].
Mat encoder_reference_points(std::span<const LevelShape> shapes);

}  // namespace ddetr
