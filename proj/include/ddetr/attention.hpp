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

#include <span>
#include <vector>

#include "ddetr/common.hpp"
#include "ddetr/kernels.hpp"
#include "ddetr/layers.hpp"

namespace ddetr {

/// Attention dimensions. M heads, C channels, C_v per-head value channels (C / M unless
/// set explicitly), K sampling points per level and L levels.
struct AttnConfig {
  int heads = 8;
  int channels = 256;
  int head_dim = 0;
  int points = 4;
  int levels = 4;

  int value_dim() const { return head_dim > 0 ? head_dim : channels / heads; }
  int inner_dim() const { return heads * value_dim(); }
  int samples_per_head() const { return levels * points; }
  void validate() const;
};

struct LevelShape {
  int height = 0;
  int width = 0;
  int size() const { return height * width; }
  bool operator==(const LevelShape&) const = default;
};

/// Multi-level features flattened level-major, row-major within a level: [sum H_l W_l, C].
struct FlatFeatures {
  Mat tokens;
  std::vector<LevelShape> shapes;

  int num_levels() const { return static_cast<int>(shapes.size()); }
  std::vector<int> level_starts() const;
  int total_tokens() const;
  static FlatFeatures from_maps(std::span<const FeatureMap> maps);
  std::vector<FeatureMap> to_maps() const;
};

// ---------------------------------------------------------------------------
// Dense multi-head attention.

/// Per-head projections are stored stacked: head m owns rows [m*C_v, (m+1)*C_v) of the
/// query (U), key (V) and value (W') projections and the matching columns of the output
/// projection (W). Biases are zero-initialized.
struct DenseAttnParams {
  Linear query_proj;
  Linear key_proj;
  Linear value_proj;
  Linear output_proj;

  static DenseAttnParams init(const AttnConfig& cfg, Rng& rng);
  void collect(ParamList& out, const std::string& prefix);
};

struct MhaCache {
  Mat queries_in;
  Mat keys_in;
  Mat values_in;
  Mat q;
  Mat k;
  Mat v;
  std::vector<Mat> weights;  // per head, [N_q, N_k]
  Mat heads;                 // [N_q, M*C_v]
};

/// Attention with separate key and value inputs (values drive W' x_k).
Mat multi_head_attn(const Mat& queries, const Mat& keys, const Mat& values, const DenseAttnParams& params,
                    const AttnConfig& cfg, MhaCache* cache = nullptr, MacCounter* macs = nullptr);

/// Keys double as values, as in the textbook formulation.
inline Mat multi_head_attn(const Mat& queries, const Mat& keys, const DenseAttnParams& params,
                           const AttnConfig& cfg) {
  return multi_head_attn(queries, keys, keys, params, cfg);
}

/// Per-head attention weights [N_q, N_k] for the given inputs.
std::vector<Mat> dense_attention_weights(const Mat& queries, const Mat& keys, const DenseAttnParams& params,
                                         const AttnConfig& cfg);

struct MhaGrads {
  Mat d_queries;
  Mat d_keys;
  Mat d_values;
};

MhaGrads multi_head_attn_backward(DenseAttnParams& params, const AttnConfig& cfg, const MhaCache& cache,
                                  const Mat& d_out);

// ---------------------------------------------------------------------------
// Deformable attention.

struct DeformAttnParams {
  Linear value_proj;         // W', [M*C_v, C]
  Linear sampling_offsets;   // [2*M*L*K, C], channel ((m*L + l)*K + k)*2 + {x, y}
  Linear attention_weights;  // [M*L*K, C], softmaxed over (l, k) per head
  Linear output_proj;        // W, [C, M*C_v]

  void collect(ParamList& out, const std::string& prefix, double offset_lr_scale = 1.0);
};

/// Offsets and normalized weights for every (query, head, level, point).
struct SamplingPlan {
  int queries = 0;
  int heads = 0;
  int levels = 0;
  int points = 0;
  Mat offsets;  // [N_q, M*L*K*2]
  Mat weights;  // [N_q, M*L*K]

  SamplingPlan() = default;
  SamplingPlan(int n_query, int m, int l, int k)
      : queries(n_query), heads(m), levels(l), points(k),
        offsets(Mat::Zero(n_query, 2 * m * l * k)), weights(Mat::Zero(n_query, m * l * k)) {}

  int slot(int m, int l, int k) const { return (m * levels + l) * points + k; }
  Point2 offset(int q, int m, int l, int k) const {
    const int s = slot(m, l, k);
    return {offsets(q, 2 * s), offsets(q, 2 * s + 1)};
  }
  void set_offset(int q, int m, int l, int k, Point2 p) {
    const int s = slot(m, l, k);
    offsets(q, 2 * s) = p.x;
    offsets(q, 2 * s + 1) = p.y;
  }
  double weight(int q, int m, int l, int k) const { return weights(q, slot(m, l, k)); }
};

/// How reference rows are interpreted when placing samples.
enum class ReferenceKind {
  Normalized,  // [N_q, 2] in [0,1]^2; sample at phi_l(ref) + offset (offset in level pixels)
  Box,         // [N_q, 4] (cx, cy, w, h); sample at phi_l((cx, cy) + offset * (w, h))
  Pixel,       // [N_q, 2] in pixel units; sample at ref + offset on every level
};

enum class ExecutionOrder {
  ProjectThenSample,  // W' x computed once for every key, then sampled
  SampleThenProject,  // raw x sampled, then W'_m applied per sampled point
  Auto,               // whichever is cheaper for the given sizes
};

/// Pixel coordinates of every sample: [N_q, M*L*K*2], same slot layout as the plan.
Mat sampling_locations(const SamplingPlan& plan, const Mat& refs, ReferenceKind kind,
                       std::span<const LevelShape> shapes);

SamplingPlan predict_sampling_params(const Mat& queries, const DeformAttnParams& params, const AttnConfig& cfg,
                                     MacCounter* macs = nullptr);

struct MsDeformCache {
  Mat query;
  Mat refs;
  ReferenceKind kind = ReferenceKind::Normalized;
  Mat input;  // raw value input tokens
  std::vector<LevelShape> shapes;
  Mat value;  // projected value tokens
  SamplingPlan plan;
  Mat locations;
  Mat heads;  // [N_q, M*C_v] before the output projection
};

/// Sample-and-aggregate for a given plan (used directly by equivalence checks).
Mat deform_aggregate(const SamplingPlan& plan, const Mat& refs, ReferenceKind kind, const FlatFeatures& input,
                     const DeformAttnParams& params, const AttnConfig& cfg,
                     ExecutionOrder order = ExecutionOrder::ProjectThenSample, MacCounter* macs = nullptr);

Mat ms_deform_attn(const Mat& queries, const Mat& refs, ReferenceKind kind, const FlatFeatures& input,
                   const DeformAttnParams& params, const AttnConfig& cfg,
                   ExecutionOrder order = ExecutionOrder::ProjectThenSample, MsDeformCache* cache = nullptr,
                   MacCounter* macs = nullptr);

/// Multi-scale form over a pyramid with normalized references.
Mat ms_deform_attn(const Mat& queries, const Mat& normalized_refs, std::span<const FeatureMap> pyramid,
                   const DeformAttnParams& params, const AttnConfig& cfg);

/// Single-scale form: references in pixel coordinates of `map`; requires cfg.levels == 1.
Mat deform_attn(const Mat& queries, const Mat& pixel_refs, const FeatureMap& map, const DeformAttnParams& params,
                const AttnConfig& cfg);

struct MsDeformGrads {
  Mat d_query;
  Mat d_input;
  Mat d_refs;
};

/// Gradients w.r.t. query, value input and references; parameter gradients are
/// accumulated into `params`.
MsDeformGrads ms_deform_attn_backward(DeformAttnParams& params, const AttnConfig& cfg, const MsDeformCache& cache,
                                      const Mat& d_out);

/// Canonical direction for head m (cycled for M > 8).
Point2 init_direction(int head);

/// Zero sampling weights, uniform attention bias, directional offset bias scaled by
/// point index k (and by 1/(2K) in refinement mode). W' and W are Xavier-uniform.
DeformAttnParams init_deform_params(const AttnConfig& cfg, bool refinement_mode, Rng& rng);

// ---------------------------------------------------------------------------
// Cost model.

struct CostModel {
  std::uint64_t flops_dense = 0;
  std::uint64_t flops_deform = 0;

  struct Dense {
    std::uint64_t query_proj = 0;  // N_q C^2
    std::uint64_t key_proj = 0;    // N_k C^2
    std::uint64_t pairwise = 0;    // N_q N_k C
  } dense;

  struct Deform {
    std::uint64_t query_proj = 0;       // N_q C^2
    std::uint64_t value_proj = 0;       // sum_l min(H_l W_l C^2, N_q K C^2)
    std::uint64_t sampling = 0;         // 5 N_q K C per level
    std::uint64_t sampling_params = 0;  // 3 N_q C M K per level
  } deform;
};

/// N_k is the total token count of `levels`.
CostModel flop_estimate(const AttnConfig& cfg, std::int64_t n_query, std::span<const LevelShape> levels);

}  // namespace ddetr
