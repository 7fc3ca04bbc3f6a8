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

#include "ddetr/pyramid.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ddetr {

std::vector<LevelShape> FeaturePyramid::shapes() const {
  std::vector<LevelShape> out;
  for (const auto& l : levels) out.push_back({l.height, l.width});
  return out;
}

FlatFeatures FeaturePyramid::flatten() const { return FlatFeatures::from_maps(levels); }

StemParams StemParams::init(int width, int channels, int levels, Rng& rng, int first_stage) {
  if (width < 1 || channels < 1 || levels < 1) throw std::invalid_argument("StemParams: sizes must be positive");
  if (first_stage < 0 || first_stage > 2) throw std::invalid_argument("StemParams: first stage must be 0, 1 or 2");
  StemParams s;
  s.channels = channels;
  s.levels = levels;
  s.first_stage = first_stage;
  s.conv0 = Conv2d(3, width, 3, 2, 1, rng);
  s.conv1 = Conv2d(width, width, 3, 2, 1, rng);
  const int n_out = output_stages(levels, first_stage);
  const int n_stages = first_stage + n_out;
  int in = width;
  for (int i = 0; i < n_stages; ++i) {
    const int out = 2 * width;
    s.stages.emplace_back(in, out, 3, 2, 1, rng);
    if (i >= first_stage) s.input_proj.push_back(Linear::xavier(out, channels, rng));
    in = out;
  }
  for (int i = n_out; i < levels; ++i) {
    s.extra.emplace_back(i == n_out ? in : channels, channels, 3, 2, 1, rng);
  }
  return s;
}

int StemParams::required_divisor() const { return 1 << (2 + static_cast<int>(stages.size())); }

void StemParams::collect(ParamList& out, const std::string& prefix) {
  conv0.collect(out, prefix + ".conv0");
  conv1.collect(out, prefix + ".conv1");
  for (std::size_t i = 0; i < stages.size(); ++i) stages[i].collect(out, prefix + ".stage" + std::to_string(i));
  for (std::size_t i = 0; i < input_proj.size(); ++i) {
    input_proj[i].collect(out, prefix + ".input_proj" + std::to_string(i));
  }
  for (std::size_t i = 0; i < extra.size(); ++i) extra[i].collect(out, prefix + ".extra" + std::to_string(i));
}

FeaturePyramid build_pyramid(const FeatureMap& image, const StemParams& stem, PyramidCache* cache,
                             MacCounter* macs) {
  if (image.channels() != 3) throw std::invalid_argument("build_pyramid: image must have 3 channels");
  const int div = stem.required_divisor();
  if (image.height % div != 0 || image.width % div != 0) {
    throw std::invalid_argument("build_pyramid: image size must be divisible by " + std::to_string(div));
  }
  PyramidCache local;
  PyramidCache& c = cache != nullptr ? *cache : local;
  c = PyramidCache{};

  int h = image.height;
  int w = image.width;
  Mat x = relu(stem.conv0.forward(image.tokens(), h, w, &c.conv0, macs));
  h = stem.conv0.out_size(h);
  w = stem.conv0.out_size(w);
  c.conv0_out.push_back(x);
  x = relu(stem.conv1.forward(x, h, w, &c.conv1, macs));
  h = stem.conv1.out_size(h);
  w = stem.conv1.out_size(w);
  c.conv0_out.push_back(x);

  FeaturePyramid pyr;
  int stride = 4;
  for (std::size_t i = 0; i < stem.stages.size(); ++i) {
    c.stages.emplace_back();
    x = relu(stem.stages[i].forward(x, h, w, &c.stages.back(), macs));
    h = stem.stages[i].out_size(h);
    w = stem.stages[i].out_size(w);
    stride *= 2;
    c.stage_out.push_back(x);
    c.stage_shapes.push_back({h, w});
    if (static_cast<int>(i) < stem.first_stage) continue;
    const int level_id = pyr.num_levels();
    Mat level = stem.input_proj[static_cast<std::size_t>(level_id)].forward(x, macs);
    pyr.levels.push_back(FeatureMap::from_tokens(level, h, w, level_id));
    pyr.strides.push_back(stride);
  }
  for (std::size_t i = 0; i < stem.extra.size(); ++i) {
    c.extra.emplace_back();
    const Mat& src = i == 0 ? c.stage_out.back() : Mat(pyr.levels.back().tokens());
    const int sh = i == 0 ? c.stage_shapes.back().height : pyr.levels.back().height;
    const int sw = i == 0 ? c.stage_shapes.back().width : pyr.levels.back().width;
    Mat level = stem.extra[i].forward(src, sh, sw, &c.extra.back(), macs);
    const int nh = stem.extra[i].out_size(sh);
    const int nw = stem.extra[i].out_size(sw);
    stride *= 2;
    pyr.levels.push_back(FeatureMap::from_tokens(level, nh, nw, pyr.num_levels()));
    pyr.strides.push_back(stride);
  }
  return pyr;
}

void build_pyramid_backward(StemParams& stem, const PyramidCache& cache, const std::vector<Mat>& d_levels) {
  const std::size_t n_stages = stem.stages.size();
  const std::size_t n_out = stem.input_proj.size();
  const std::size_t first = n_stages - n_out;
  if (d_levels.size() != n_out + stem.extra.size()) {
    throw std::invalid_argument("build_pyramid_backward: level count mismatch");
  }
  // Extra levels chain off each other, so walk them last to first.
  Mat d_last_stage = Mat::Zero(cache.stage_out.back().rows(), cache.stage_out.back().cols());
  Mat d_carry;
  for (std::size_t i = stem.extra.size(); i-- > 0;) {
    Mat d = d_levels[n_out + i];
    if (d_carry.size() > 0) d += d_carry;
    Mat d_src = stem.extra[i].backward(cache.extra[i], d);
    if (i == 0) {
      d_last_stage += d_src;
    } else {
      d_carry = std::move(d_src);
    }
  }

  Mat d_x;
  for (std::size_t i = n_stages; i-- > 0;) {
    Mat d_stage = i >= first ? stem.input_proj[i - first].backward(cache.stage_out[i], d_levels[i - first])
                             : Mat::Zero(cache.stage_out[i].rows(), cache.stage_out[i].cols());
    if (i + 1 == n_stages) d_stage += d_last_stage;
    if (d_x.size() > 0) d_stage += d_x;
    d_stage = relu_backward(cache.stage_out[i], d_stage);
    d_x = stem.stages[i].backward(cache.stages[i], d_stage);
  }
  d_x = relu_backward(cache.conv0_out[1], d_x);
  d_x = stem.conv1.backward(cache.conv1, d_x);
  d_x = relu_backward(cache.conv0_out[0], d_x);
  stem.conv0.backward(cache.conv0, d_x);
}

double pixel_to_normalized(int i, int n) { return n <= 1 ? 0.5 : static_cast<double>(i) / (n - 1); }

void sine_embed_point(double x, double y, int channels, double* out) {
  if (channels <= 0 || channels % 2 != 0) throw std::invalid_argument("sine embedding: channel count must be even");
  constexpr double kTemperature = 10000.0;
  const int half = channels / 2;
  const double scale = 2.0 * std::numbers::pi;
  const double coords[2] = {y * scale, x * scale};
  for (int part = 0; part < 2; ++part) {
    for (int i = 0; i < half; ++i) {
      const double dim_t = std::pow(kTemperature, 2.0 * (i / 2) / half);
      const double arg = coords[part] / dim_t;
      out[part * half + i] = (i % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
  }
}

Mat sine_positional_embedding(int height, int width, int channels) {
  if (channels % 2 != 0) throw std::invalid_argument("sine_positional_embedding: odd channel count");
  if (height < 1 || width < 1) throw std::invalid_argument("sine_positional_embedding: empty map");
  Mat tokens(static_cast<Eigen::Index>(height) * width, channels);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      sine_embed_point(pixel_to_normalized(x, width), pixel_to_normalized(y, height), channels,
                       tokens.row(static_cast<Eigen::Index>(y) * width + x).data());
    }
  }
  return tokens.transpose();
}

Mat level_position_tokens(std::span<const LevelShape> shapes, const Mat& scale_embeddings) {
  if (scale_embeddings.rows() != static_cast<Eigen::Index>(shapes.size())) {
    throw std::invalid_argument("level_position_tokens: one scale embedding per level required");
  }
  const int channels = static_cast<int>(scale_embeddings.cols());
  int total = 0;
  for (const auto& s : shapes) total += s.size();
  Mat out(total, channels);
  int row = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const Mat pos = sine_positional_embedding(shapes[l].height, shapes[l].width, channels).transpose();
    out.middleRows(row, pos.rows()) = pos.rowwise() + scale_embeddings.row(static_cast<Eigen::Index>(l));
    row += static_cast<int>(pos.rows());
  }
  return out;
}

AttachedPyramid attach_embeddings(const FeaturePyramid& pyramid, const std::vector<Mat>& positional,
                                  const Mat& scale_embeddings) {
  if (positional.size() != pyramid.levels.size() ||
      scale_embeddings.rows() != static_cast<Eigen::Index>(pyramid.levels.size())) {
    throw std::invalid_argument("attach_embeddings: one embedding per level required");
  }
  AttachedPyramid out;
  out.values = pyramid.flatten();
  out.keys = out.values.tokens;
  int row = 0;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const auto& lvl = pyramid.levels[l];
    if (positional[l].rows() != lvl.data.rows() || positional[l].cols() != lvl.data.cols() ||
        scale_embeddings.cols() != lvl.data.rows()) {
      throw std::invalid_argument("attach_embeddings: embedding shape mismatch");
    }
    const auto n = lvl.data.cols();
    out.keys.middleRows(row, n) += positional[l].transpose();
    out.keys.middleRows(row, n).rowwise() += scale_embeddings.row(static_cast<Eigen::Index>(l));
    row += static_cast<int>(n);
  }
  return out;
}

Point2 rescale_reference(Point2 normalized, LevelShape level) {
  if (!(normalized.x >= 0.0 && normalized.x <= 1.0 && normalized.y >= 0.0 && normalized.y <= 1.0)) {
    throw std::out_of_range("rescale_reference: point outside [0,1]^2");
  }
  return {normalized.x * (level.width - 1), normalized.y * (level.height - 1)};
}

Mat encoder_reference_points(std::span<const LevelShape> shapes) {
  int total = 0;
  for (const auto& s : shapes) total += s.size();
  Mat refs(total, 2);
  int row = 0;
  for (const auto& s : shapes) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        refs(row, 0) = pixel_to_normalized(x, s.width);
        refs(row, 1) = pixel_to_normalized(y, s.height);
        ++row;
      }
    }
  }
  return refs;
}

}  // namespace ddetr
