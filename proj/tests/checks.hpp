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

// Randomized property checks shared by the unit tests and the acceptance run. Each
// returns the worst deviation of one random instance from its oracle.

#include <algorithm>
#include <array>
#include <limits>
#include <numeric>
#include <vector>

#include "ddetr/attention.hpp"
#include "ddetr/matching.hpp"
#include "oracles.hpp"

namespace checks {

using namespace ddetr;

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

inline void randomize(Linear& l, double scale, Rng& rng) {
  l.weight.value = normal_matrix(l.weight.value.rows(), l.weight.value.cols(), scale, rng);
  l.bias.value = normal_matrix(1, l.bias.value.cols(), scale, rng);
}

inline DenseAttnParams random_dense(const AttnConfig& cfg, Rng& rng) {
  DenseAttnParams p = DenseAttnParams::init(cfg, rng);
  for (Linear* l : {&p.query_proj, &p.key_proj, &p.value_proj, &p.output_proj}) randomize(*l, 0.4, rng);
  return p;
}

inline DeformAttnParams random_deform(const AttnConfig& cfg, Rng& rng) {
  DeformAttnParams p = init_deform_params(cfg, false, rng);
  randomize(p.value_proj, 0.4, rng);
  randomize(p.output_proj, 0.4, rng);
  randomize(p.attention_weights, 0.5, rng);
  p.sampling_offsets.weight.value = normal_matrix(p.sampling_offsets.weight.value.rows(), cfg.channels, 0.3, rng);
  p.sampling_offsets.bias.value += normal_matrix(1, p.sampling_offsets.bias.value.cols(), 0.7, rng);
  return p;
}

inline FlatFeatures random_features(std::vector<LevelShape> shapes, int channels, Rng& rng) {
  FlatFeatures f;
  f.shapes = std::move(shapes);
  f.tokens = normal_matrix(f.total_tokens(), channels, 1.0, rng);
  return f;
}

inline Mat uniform_refs(Eigen::Index n, int cols, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat r(n, cols);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = u(rng);
  return r;
}

/// A 3x3 deformable convolution written as deformable attention: one head per kernel
/// tap, one point per head, identity value projection, unit weights, offset = tap
/// position + shift. Compared against a direct loop over taps.
inline double deform_conv_error(Rng& rng) {
  std::uniform_int_distribution<int> side(3, 7);
  std::normal_distribution<double> shift(0.0, 0.8);
  const int c = 3, h = side(rng), w = side(rng);
  AttnConfig cfg{.heads = 9, .channels = c, .head_dim = c, .points = 1, .levels = 1};
  DeformAttnParams p;
  p.value_proj = Linear(c, 9 * c);
  for (int m = 0; m < 9; ++m) p.value_proj.weight.value.block(m * c, 0, c, c).setIdentity();
  p.sampling_offsets = Linear(c, 2 * 9);
  p.attention_weights = Linear(c, 9);
  p.output_proj = Linear(9 * c, c);
  p.output_proj.weight.value = normal_matrix(c, 9 * c, 1.0, rng);
  p.output_proj.bias.value = normal_matrix(1, c, 1.0, rng);

  FeatureMap x(c, h, w);
  x.data = normal_matrix(c, h * w, 1.0, rng);
  const int n = h * w;
  SamplingPlan plan(n, 9, 1, 1);
  Mat refs(n, 2);
  std::vector<std::array<double, 2>> shifts(static_cast<std::size_t>(9 * n));
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      const int q = py * w + px;
      refs.row(q) << px, py;
      for (int g = 0; g < 9; ++g) {
        auto& s = shifts[static_cast<std::size_t>(q * 9 + g)];
        s = {shift(rng), shift(rng)};
        plan.set_offset(q, g, 0, 0, {g % 3 - 1 + s[0], g / 3 - 1 + s[1]});
        plan.weights(q, g) = 1.0;
      }
    }
  }
  const FlatFeatures f = FlatFeatures::from_maps(std::span(&x, 1));
  const Mat out = deform_aggregate(plan, refs, ReferenceKind::Pixel, f, p, cfg);

  double worst = 0.0;
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      const int q = py * w + px;
      for (int co = 0; co < c; ++co) {
        double acc = p.output_proj.bias.value(0, co);
        for (int g = 0; g < 9; ++g) {
          const auto& s = shifts[static_cast<std::size_t>(q * 9 + g)];
          const double sx = px + (g % 3 - 1) + s[0];
          const double sy = py + (g / 3 - 1) + s[1];
          for (int ci = 0; ci < c; ++ci) {
            acc += p.output_proj.weight.value(co, g * c + ci) * oracle::bilinear(x.data, h, w, ci, sx, sy);
          }
        }
        worst = std::max(worst, std::abs(acc - out(q, co)));
      }
    }
  }
  return worst;
}

/// Sampling every pixel once with the dense attention weights reproduces dense
/// multi-head attention when both share value and output projections.
inline double dense_equivalence_error(Rng& rng) {
  std::uniform_int_distribution<int> side(2, 5);
  const int h = side(rng), w = side(rng), n = h * w;
  AttnConfig dense_cfg{.heads = 2, .channels = 8};
  const DenseAttnParams dp = random_dense(dense_cfg, rng);
  FeatureMap x(8, h, w);
  x.data = normal_matrix(8, n, 1.0, rng);
  const Mat keys = x.tokens();
  const Mat q = normal_matrix(3, 8, 1.0, rng);
  const std::vector<Mat> a = dense_attention_weights(q, keys, dp, dense_cfg);

  AttnConfig cfg{.heads = 2, .channels = 8, .points = n, .levels = 1};
  DeformAttnParams p;
  p.value_proj = dp.value_proj;
  p.output_proj = dp.output_proj;
  p.sampling_offsets = Linear(8, 2 * 2 * n);
  p.attention_weights = Linear(8, 2 * n);
  SamplingPlan plan(3, 2, 1, n);
  for (int qi = 0; qi < 3; ++qi) {
    for (int m = 0; m < 2; ++m) {
      for (int k = 0; k < n; ++k) {
        plan.set_offset(qi, m, 0, k, {static_cast<double>(k % w), static_cast<double>(k / w)});
        plan.weights(qi, plan.slot(m, 0, k)) = a[static_cast<std::size_t>(m)](qi, k);
      }
    }
  }
  const Mat refs = Mat::Zero(3, 2);
  const FlatFeatures f = FlatFeatures::from_maps(std::span(&x, 1));
  return max_abs_diff(deform_aggregate(plan, refs, ReferenceKind::Pixel, f, p, cfg),
                      multi_head_attn(q, keys, dp, dense_cfg));
}

/// Projecting values before or after sampling gives the same output, for point and
/// box references reaching past the map borders.
inline double execution_order_error(Rng& rng) {
  AttnConfig cfg{.heads = 2, .channels = 8, .points = 2, .levels = 3};
  const DeformAttnParams p = random_deform(cfg, rng);
  const FlatFeatures f = random_features({{6, 5}, {3, 3}, {2, 1}}, 8, rng);
  const Mat q = normal_matrix(5, 8, 1.0, rng);
  const Mat norm_refs = uniform_refs(5, 2, 0.0, 1.0, rng);
  const Mat box_refs = uniform_refs(5, 4, 0.0, 1.0, rng);
  double worst = 0.0;
  for (ReferenceKind kind : {ReferenceKind::Normalized, ReferenceKind::Box}) {
    const Mat& refs = kind == ReferenceKind::Box ? box_refs : norm_refs;
    const Mat a = ms_deform_attn(q, refs, kind, f, p, cfg, ExecutionOrder::ProjectThenSample);
    const Mat b = ms_deform_attn(q, refs, kind, f, p, cfg, ExecutionOrder::SampleThenProject);
    const Mat c = ms_deform_attn(q, refs, kind, f, p, cfg, ExecutionOrder::Auto);
    worst = std::max({worst, max_abs_diff(a, b), max_abs_diff(a, c)});
  }
  return worst;
}

/// Number of sampling weights and offsets that differ from the initialization pattern:
/// weight 1/(LK), head m along the m-th of 8 directions at distance k+1, scaled by
/// 1/(2K) in refinement mode. Exact comparison.
inline long init_pattern_mismatches(int points, int levels, bool refine, Rng& rng) {
  static constexpr int kDirs[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};
  AttnConfig cfg{.heads = 8, .channels = 16, .points = points, .levels = levels};
  const DeformAttnParams p = init_deform_params(cfg, refine, rng);
  const SamplingPlan plan = predict_sampling_params(normal_matrix(3, 16, 1.0, rng), p, cfg);
  const double scale = refine ? 1.0 / (2.0 * points) : 1.0;
  long bad = 0;
  for (int q = 0; q < 3; ++q) {
    for (int m = 0; m < 8; ++m) {
      for (int l = 0; l < levels; ++l) {
        for (int k = 0; k < points; ++k) {
          const Point2 o = plan.offset(q, m, l, k);
          bad += plan.weight(q, m, l, k) != 1.0 / (levels * points);
          bad += o.x != kDirs[m][0] * (k + 1.0) * scale;
          bad += o.y != kDirs[m][1] * (k + 1.0) * scale;
        }
      }
    }
  }
  return bad;
}

/// Exhaustive minimum over injective assignments of columns to rows.
inline double brute_force_assignment(const Mat& cost) {
  std::vector<int> rows(static_cast<std::size_t>(cost.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Eigen::Index j = 0; j < cost.cols(); ++j) s += cost(rows[static_cast<std::size_t>(j)], j);
    best = std::min(best, s);
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

/// Gap between the Hungarian cost and the brute-force minimum on a random instance;
/// infinity when the assignment is not injective or misreports its cost.
inline double hungarian_gap(int n, int g, Rng& rng, bool coarse = false) {
  std::uniform_real_distribution<double> u(0.0, 10.0);
  Mat cost(n, g);
  for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = coarse ? std::floor(u(rng) / 3) : u(rng);
  const MatchResult r = hungarian_match(cost);
  if (r.pairs.size() != static_cast<std::size_t>(g)) return std::numeric_limits<double>::infinity();
  std::vector<int> used;
  double s = 0.0;
  for (std::size_t j = 0; j < r.pairs.size(); ++j) {
    if (r.pairs[j].second != static_cast<int>(j)) return std::numeric_limits<double>::infinity();
    used.push_back(r.pairs[j].first);
    s += cost(r.pairs[j].first, r.pairs[j].second);
  }
  std::sort(used.begin(), used.end());
  if (std::adjacent_find(used.begin(), used.end()) != used.end()) return std::numeric_limits<double>::infinity();
  if (std::abs(s - r.total_cost) > 1e-9) return std::numeric_limits<double>::infinity();
  return std::abs(s - brute_force_assignment(cost));
}

}  // namespace checks
