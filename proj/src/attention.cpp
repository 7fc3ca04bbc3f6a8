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

#include "ddetr/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ddetr {

void AttnConfig::validate() const {
  if (heads < 1 || points < 1 || levels < 1 || channels < 1) {
    throw std::invalid_argument("AttnConfig: heads, points, levels and channels must be positive");
  }
  if (head_dim == 0 && channels % heads != 0) {
    throw std::invalid_argument("AttnConfig: channels must be divisible by heads");
  }
  if (head_dim < 0) throw std::invalid_argument("AttnConfig: negative head_dim");
}

std::vector<int> FlatFeatures::level_starts() const {
  std::vector<int> starts;
  int acc = 0;
  for (const auto& s : shapes) {
    starts.push_back(acc);
    acc += s.size();
  }
  return starts;
}

int FlatFeatures::total_tokens() const {
  int acc = 0;
  for (const auto& s : shapes) acc += s.size();
  return acc;
}

FlatFeatures FlatFeatures::from_maps(std::span<const FeatureMap> maps) {
  FlatFeatures f;
  if (maps.empty()) return f;
  int total = 0;
  for (const auto& m : maps) {
    if (m.channels() != maps.front().channels()) throw std::invalid_argument("FlatFeatures: channel mismatch");
    f.shapes.push_back({m.height, m.width});
    total += m.height * m.width;
  }
  f.tokens.resize(total, maps.front().channels());
  int row = 0;
  for (const auto& m : maps) {
    f.tokens.middleRows(row, m.data.cols()) = m.data.transpose();
    row += static_cast<int>(m.data.cols());
  }
  return f;
}

std::vector<FeatureMap> FlatFeatures::to_maps() const {
  std::vector<FeatureMap> maps;
  const auto starts = level_starts();
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    maps.push_back(FeatureMap::from_tokens(tokens.middleRows(starts[l], shapes[l].size()), shapes[l].height,
                                           shapes[l].width, static_cast<int>(l)));
  }
  return maps;
}

// ---------------------------------------------------------------------------

DenseAttnParams DenseAttnParams::init(const AttnConfig& cfg, Rng& rng) {
  cfg.validate();
  DenseAttnParams p;
  p.query_proj = Linear::xavier(cfg.channels, cfg.inner_dim(), rng);
  p.key_proj = Linear::xavier(cfg.channels, cfg.inner_dim(), rng);
  p.value_proj = Linear::xavier(cfg.channels, cfg.inner_dim(), rng);
  p.output_proj = Linear::xavier(cfg.inner_dim(), cfg.channels, rng);
  return p;
}

void DenseAttnParams::collect(ParamList& out, const std::string& prefix) {
  query_proj.collect(out, prefix + ".query_proj");
  key_proj.collect(out, prefix + ".key_proj");
  value_proj.collect(out, prefix + ".value_proj");
  output_proj.collect(out, prefix + ".output_proj");
}

namespace {

void check_dense_shapes(const Mat& queries, const Mat& keys, const Mat& values, const DenseAttnParams& params,
                        const AttnConfig& cfg) {
  cfg.validate();
  if (queries.cols() != cfg.channels || keys.cols() != cfg.channels || values.cols() != cfg.channels) {
    throw std::invalid_argument("multi_head_attn: input width must equal C");
  }
  if (keys.rows() != values.rows()) throw std::invalid_argument("multi_head_attn: key/value count mismatch");
  if (keys.rows() == 0) throw std::invalid_argument("multi_head_attn: no keys");
  if (params.query_proj.out_features() != cfg.inner_dim() || params.output_proj.in_features() != cfg.inner_dim()) {
    throw std::invalid_argument("multi_head_attn: parameter shapes do not match config");
  }
}

void softmax_rows(Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

}  // namespace

std::vector<Mat> dense_attention_weights(const Mat& queries, const Mat& keys, const DenseAttnParams& params,
                                         const AttnConfig& cfg) {
  check_dense_shapes(queries, keys, keys, params, cfg);
  const int cv = cfg.value_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cv));
  const Mat q = params.query_proj.forward(queries);
  const Mat k = params.key_proj.forward(keys);
  std::vector<Mat> weights;
  for (int m = 0; m < cfg.heads; ++m) {
    Mat s = (q.middleCols(m * cv, cv) * k.middleCols(m * cv, cv).transpose()) * scale;
    softmax_rows(s);
    weights.push_back(std::move(s));
  }
  return weights;
}

Mat multi_head_attn(const Mat& queries, const Mat& keys, const Mat& values, const DenseAttnParams& params,
                    const AttnConfig& cfg, MhaCache* cache, MacCounter* macs) {
  check_dense_shapes(queries, keys, values, params, cfg);
  const int cv = cfg.value_dim();
  const auto nq = queries.rows();
  const auto nk = keys.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cv));

  Mat q = params.query_proj.forward(queries, macs);
  Mat k = params.key_proj.forward(keys, macs);
  Mat v = params.value_proj.forward(values, macs);
  Mat heads(nq, cfg.inner_dim());
  std::vector<Mat> weights;
  for (int m = 0; m < cfg.heads; ++m) {
    Mat s(nq, nk);
    s.noalias() = q.middleCols(m * cv, cv) * k.middleCols(m * cv, cv).transpose();
    s *= scale;
    softmax_rows(s);
    heads.middleCols(m * cv, cv).noalias() = s * v.middleCols(m * cv, cv);
    if (cache != nullptr) weights.push_back(std::move(s));
  }
  // q.k^T and A.v, each N_q N_k C_v per head.
  count(macs, 2ULL * static_cast<std::uint64_t>(nq) * nk * cfg.inner_dim());
  Mat out = params.output_proj.forward(heads, macs);

  if (cache != nullptr) {
    cache->queries_in = queries;
    cache->keys_in = keys;
    cache->values_in = values;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(weights);
    cache->heads = std::move(heads);
  }
  return out;
}

MhaGrads multi_head_attn_backward(DenseAttnParams& params, const AttnConfig& cfg, const MhaCache& cache,
                                  const Mat& d_out) {
  const int cv = cfg.value_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cv));
  const Mat d_heads = params.output_proj.backward(cache.heads, d_out);

  Mat dq = Mat::Zero(cache.q.rows(), cache.q.cols());
  Mat dk = Mat::Zero(cache.k.rows(), cache.k.cols());
  Mat dv = Mat::Zero(cache.v.rows(), cache.v.cols());
  for (int m = 0; m < cfg.heads; ++m) {
    const Mat& a = cache.weights[m];
    const auto dh = d_heads.middleCols(m * cv, cv);
    Mat da = dh * cache.v.middleCols(m * cv, cv).transpose();
    dv.middleCols(m * cv, cv).noalias() += a.transpose() * dh;
    // Softmax Jacobian, row by row.
    const Vec row_dot = (da.array() * a.array()).rowwise().sum();
    Mat ds = a.array() * (da.colwise() - row_dot).array();
    ds *= scale;
    dq.middleCols(m * cv, cv).noalias() += ds * cache.k.middleCols(m * cv, cv);
    dk.middleCols(m * cv, cv).noalias() += ds.transpose() * cache.q.middleCols(m * cv, cv);
  }

  MhaGrads g;
  g.d_queries = params.query_proj.backward(cache.queries_in, dq);
  g.d_keys = params.key_proj.backward(cache.keys_in, dk);
  g.d_values = params.value_proj.backward(cache.values_in, dv);
  return g;
}

// ---------------------------------------------------------------------------

void DeformAttnParams::collect(ParamList& out, const std::string& prefix, double offset_lr_scale) {
  value_proj.collect(out, prefix + ".value_proj");
  sampling_offsets.collect(out, prefix + ".sampling_offsets", offset_lr_scale);
  attention_weights.collect(out, prefix + ".attention_weights");
  output_proj.collect(out, prefix + ".output_proj");
}

namespace {

void check_deform_params(const DeformAttnParams& params, const AttnConfig& cfg) {
  cfg.validate();
  const int mlk = cfg.heads * cfg.levels * cfg.points;
  if (params.sampling_offsets.out_features() != 2 * mlk || params.attention_weights.out_features() != mlk ||
      params.value_proj.out_features() != cfg.inner_dim() || params.output_proj.in_features() != cfg.inner_dim() ||
      params.value_proj.in_features() != cfg.channels || params.output_proj.out_features() != cfg.channels) {
    throw std::invalid_argument("deformable attention: parameter shapes do not match config");
  }
}

void check_refs(const Mat& refs, ReferenceKind kind, Eigen::Index n_query) {
  const Eigen::Index want = kind == ReferenceKind::Box ? 4 : 2;
  if (refs.rows() != n_query || refs.cols() != want) {
    throw std::invalid_argument("deformable attention: reference shape mismatch");
  }
}

// Pixel location of one sample plus the partial derivatives needed for backward.
struct Placement {
  double x;
  double y;
};

inline Placement place(const Mat& refs, ReferenceKind kind, Eigen::Index q, Point2 off, LevelShape shape) {
  const double sx = shape.width - 1;
  const double sy = shape.height - 1;
  switch (kind) {
    case ReferenceKind::Normalized:
      return {refs(q, 0) * sx + off.x, refs(q, 1) * sy + off.y};
    case ReferenceKind::Box:
      return {(refs(q, 0) + off.x * refs(q, 2)) * sx, (refs(q, 1) + off.y * refs(q, 3)) * sy};
    case ReferenceKind::Pixel:
      return {refs(q, 0) + off.x, refs(q, 1) + off.y};
  }
  return {0.0, 0.0};
}

ExecutionOrder resolve_order(ExecutionOrder order, const AttnConfig& cfg, Eigen::Index n_query, int n_tokens) {
  if (order != ExecutionOrder::Auto) return order;
  // HW C^2 versus N_q L K C^2.
  const std::int64_t project_all = n_tokens;
  const std::int64_t project_samples = static_cast<std::int64_t>(n_query) * cfg.levels * cfg.points;
  return project_all <= project_samples ? ExecutionOrder::ProjectThenSample : ExecutionOrder::SampleThenProject;
}

Mat aggregate_projected(const SamplingPlan& plan, const Mat& loc, const Mat& value,
                        std::span<const LevelShape> shapes, const AttnConfig& cfg) {
  const int cv = cfg.value_dim();
  std::vector<int> starts;
  int acc = 0;
  for (const auto& sh : shapes) {
    starts.push_back(acc);
    acc += sh.size();
  }
  Mat heads = Mat::Zero(plan.queries, cfg.inner_dim());
  for (int q = 0; q < plan.queries; ++q) {
    for (int m = 0; m < cfg.heads; ++m) {
      auto h = heads.row(q).segment(m * cv, cv);
      for (int l = 0; l < cfg.levels; ++l) {
        const auto& shape = shapes[l];
        for (int k = 0; k < cfg.points; ++k) {
          const int s = plan.slot(m, l, k);
          const double a = plan.weights(q, s);
          const auto st = BilinearStencil::at(loc(q, 2 * s), loc(q, 2 * s + 1), shape.height, shape.width);
          for (int i = 0; i < 4; ++i) {
            if (!st.valid[i]) continue;
            h += (a * st.weight[i]) * value.row(starts[l] + st.index[i]).segment(m * cv, cv);
          }
        }
      }
    }
  }
  return heads;
}

}  // namespace

Mat sampling_locations(const SamplingPlan& plan, const Mat& refs, ReferenceKind kind,
                       std::span<const LevelShape> shapes) {
  if (static_cast<int>(shapes.size()) != plan.levels) {
    throw std::invalid_argument("sampling_locations: level count mismatch");
  }
  check_refs(refs, kind, plan.queries);
  Mat loc(plan.queries, plan.offsets.cols());
  for (int q = 0; q < plan.queries; ++q) {
    for (int m = 0; m < plan.heads; ++m) {
      for (int l = 0; l < plan.levels; ++l) {
        for (int k = 0; k < plan.points; ++k) {
          const auto p = place(refs, kind, q, plan.offset(q, m, l, k), shapes[l]);
          const int s = plan.slot(m, l, k);
          loc(q, 2 * s) = p.x;
          loc(q, 2 * s + 1) = p.y;
        }
      }
    }
  }
  return loc;
}

SamplingPlan predict_sampling_params(const Mat& queries, const DeformAttnParams& params, const AttnConfig& cfg,
                                     MacCounter* macs) {
  check_deform_params(params, cfg);
  if (queries.cols() != cfg.channels) throw std::invalid_argument("predict_sampling_params: query width mismatch");
  SamplingPlan plan(static_cast<int>(queries.rows()), cfg.heads, cfg.levels, cfg.points);
  plan.offsets = params.sampling_offsets.forward(queries, macs);
  plan.weights = params.attention_weights.forward(queries, macs);
  const int lk = cfg.levels * cfg.points;
  for (int q = 0; q < plan.queries; ++q) {
    for (int m = 0; m < cfg.heads; ++m) {
      softmax_inplace(std::span<double>(plan.weights.row(q).data() + m * lk, lk));
    }
  }
  return plan;
}

Mat deform_aggregate(const SamplingPlan& plan, const Mat& refs, ReferenceKind kind, const FlatFeatures& input,
                     const DeformAttnParams& params, const AttnConfig& cfg, ExecutionOrder order,
                     MacCounter* macs) {
  check_deform_params(params, cfg);
  if (input.num_levels() != cfg.levels || plan.levels != cfg.levels) {
    throw std::invalid_argument("deformable attention: level count mismatch with config");
  }
  if (input.tokens.cols() != cfg.channels || input.tokens.rows() != input.total_tokens()) {
    throw std::invalid_argument("deformable attention: value input shape mismatch");
  }
  check_refs(refs, kind, plan.queries);

  const int cv = cfg.value_dim();
  const int channels = cfg.channels;
  const auto starts = input.level_starts();
  const Mat loc = sampling_locations(plan, refs, kind, input.shapes);
  Mat heads = Mat::Zero(plan.queries, cfg.inner_dim());
  const std::uint64_t n_samples = static_cast<std::uint64_t>(plan.queries) * cfg.heads * cfg.levels * cfg.points;

  order = resolve_order(order, cfg, plan.queries, input.total_tokens());
  if (order == ExecutionOrder::ProjectThenSample) {
    const Mat value = params.value_proj.forward(input.tokens, macs);
    heads = aggregate_projected(plan, loc, value, input.shapes, cfg);
    // Four corner reads plus one weighting per value channel.
    count(macs, n_samples * 5ULL * cv);
  } else {
    Vec sampled(channels);
    Vec projected(cv);
    for (int q = 0; q < plan.queries; ++q) {
      for (int m = 0; m < cfg.heads; ++m) {
        const auto w_m = params.value_proj.weight.value.middleRows(m * cv, cv);
        const auto b_m = params.value_proj.bias.value.row(0).segment(m * cv, cv);
        auto h = heads.row(q).segment(m * cv, cv);
        for (int l = 0; l < cfg.levels; ++l) {
          const auto& shape = input.shapes[l];
          for (int k = 0; k < cfg.points; ++k) {
            const int s = plan.slot(m, l, k);
            const double a = plan.weights(q, s);
            const auto st = BilinearStencil::at(loc(q, 2 * s), loc(q, 2 * s + 1), shape.height, shape.width);
            sampled.setZero();
            double support = 0.0;
            for (int i = 0; i < 4; ++i) {
              if (!st.valid[i]) continue;
              sampled += st.weight[i] * input.tokens.row(starts[l] + st.index[i]).transpose();
              support += st.weight[i];
            }
            projected.noalias() = w_m * sampled;
            projected += support * b_m.transpose();
            h += a * projected.transpose();
          }
        }
      }
    }
    // Raw sampling over C channels, per-sample projection C_v x C, weighting C_v.
    count(macs, n_samples * (4ULL * channels + static_cast<std::uint64_t>(cv) * channels + cv));
  }
  return params.output_proj.forward(heads, macs);
}

Mat ms_deform_attn(const Mat& queries, const Mat& refs, ReferenceKind kind, const FlatFeatures& input,
                   const DeformAttnParams& params, const AttnConfig& cfg, ExecutionOrder order,
                   MsDeformCache* cache, MacCounter* macs) {
  if (input.num_levels() != cfg.levels) {
    throw std::invalid_argument("ms_deform_attn: level count mismatch with config");
  }
  SamplingPlan plan = predict_sampling_params(queries, params, cfg, macs);
  if (cache == nullptr) return deform_aggregate(plan, refs, kind, input, params, cfg, order, macs);

  // Training path keeps everything backward needs and always projects first.
  cache->query = queries;
  cache->refs = refs;
  cache->kind = kind;
  cache->input = input.tokens;
  cache->shapes = input.shapes;
  check_refs(refs, kind, plan.queries);
  if (input.tokens.cols() != cfg.channels || input.tokens.rows() != input.total_tokens()) {
    throw std::invalid_argument("deformable attention: value input shape mismatch");
  }
  cache->value = params.value_proj.forward(input.tokens, macs);
  cache->locations = sampling_locations(plan, refs, kind, input.shapes);
  cache->heads = aggregate_projected(plan, cache->locations, cache->value, input.shapes, cfg);
  count(macs, static_cast<std::uint64_t>(plan.queries) * cfg.heads * cfg.levels * cfg.points * 5ULL *
                  cfg.value_dim());
  cache->plan = std::move(plan);
  return params.output_proj.forward(cache->heads, macs);
}

Mat ms_deform_attn(const Mat& queries, const Mat& normalized_refs, std::span<const FeatureMap> pyramid,
                   const DeformAttnParams& params, const AttnConfig& cfg) {
  if (static_cast<int>(pyramid.size()) != cfg.levels) {
    throw std::invalid_argument("ms_deform_attn: pyramid level count mismatch with config");
  }
  return ms_deform_attn(queries, normalized_refs, ReferenceKind::Normalized, FlatFeatures::from_maps(pyramid), params,
                        cfg);
}

Mat deform_attn(const Mat& queries, const Mat& pixel_refs, const FeatureMap& map, const DeformAttnParams& params,
                const AttnConfig& cfg) {
  if (cfg.levels != 1) throw std::invalid_argument("deform_attn: single-scale attention requires levels == 1");
  return ms_deform_attn(queries, pixel_refs, ReferenceKind::Pixel, FlatFeatures::from_maps(std::span(&map, 1)),
                        params, cfg);
}

MsDeformGrads ms_deform_attn_backward(DeformAttnParams& params, const AttnConfig& cfg, const MsDeformCache& cache,
                                      const Mat& d_out) {
  const int cv = cfg.value_dim();
  const auto& plan = cache.plan;
  const int lk = cfg.levels * cfg.points;
  std::vector<int> starts;
  {
    int acc = 0;
    for (const auto& s : cache.shapes) {
      starts.push_back(acc);
      acc += s.size();
    }
  }

  const Mat d_heads = params.output_proj.backward(cache.heads, d_out);
  Mat d_value = Mat::Zero(cache.value.rows(), cache.value.cols());
  Mat d_offsets = Mat::Zero(plan.offsets.rows(), plan.offsets.cols());
  Mat d_weights = Mat::Zero(plan.weights.rows(), plan.weights.cols());
  Mat d_refs = Mat::Zero(cache.refs.rows(), cache.refs.cols());

  for (int q = 0; q < plan.queries; ++q) {
    for (int m = 0; m < cfg.heads; ++m) {
      const auto dh = d_heads.row(q).segment(m * cv, cv);
      for (int l = 0; l < cfg.levels; ++l) {
        const auto& shape = cache.shapes[l];
        const double sx = shape.width - 1;
        const double sy = shape.height - 1;
        for (int k = 0; k < cfg.points; ++k) {
          const int s = plan.slot(m, l, k);
          const double a = plan.weights(q, s);
          const auto st = BilinearStencil::at(cache.locations(q, 2 * s), cache.locations(q, 2 * s + 1),
                                              shape.height, shape.width);
          double d_a = 0.0;
          double d_px = 0.0;
          double d_py = 0.0;
          for (int i = 0; i < 4; ++i) {
            if (!st.valid[i]) continue;
            const auto v = cache.value.row(starts[l] + st.index[i]).segment(m * cv, cv);
            const double dot = dh.dot(v);
            d_a += st.weight[i] * dot;
            d_px += st.dweight_dx[i] * dot;
            d_py += st.dweight_dy[i] * dot;
            d_value.row(starts[l] + st.index[i]).segment(m * cv, cv) += (a * st.weight[i]) * dh;
          }
          d_px *= a;
          d_py *= a;
          d_weights(q, s) = d_a;

          const Point2 off = plan.offset(q, m, l, k);
          switch (cache.kind) {
            case ReferenceKind::Normalized:
              d_offsets(q, 2 * s) = d_px;
              d_offsets(q, 2 * s + 1) = d_py;
              d_refs(q, 0) += d_px * sx;
              d_refs(q, 1) += d_py * sy;
              break;
            case ReferenceKind::Box:
              d_offsets(q, 2 * s) = d_px * cache.refs(q, 2) * sx;
              d_offsets(q, 2 * s + 1) = d_py * cache.refs(q, 3) * sy;
              d_refs(q, 0) += d_px * sx;
              d_refs(q, 1) += d_py * sy;
              d_refs(q, 2) += d_px * off.x * sx;
              d_refs(q, 3) += d_py * off.y * sy;
              break;
            case ReferenceKind::Pixel:
              d_offsets(q, 2 * s) = d_px;
              d_offsets(q, 2 * s + 1) = d_py;
              d_refs(q, 0) += d_px;
              d_refs(q, 1) += d_py;
              break;
          }
        }
      }
      // Softmax over the joint (level, point) axis of this head.
      double dot = 0.0;
      for (int j = 0; j < lk; ++j) dot += plan.weights(q, m * lk + j) * d_weights(q, m * lk + j);
      for (int j = 0; j < lk; ++j) {
        const double w = plan.weights(q, m * lk + j);
        d_weights(q, m * lk + j) = w * (d_weights(q, m * lk + j) - dot);
      }
    }
  }

  MsDeformGrads g;
  g.d_query = params.sampling_offsets.backward(cache.query, d_offsets);
  g.d_query += params.attention_weights.backward(cache.query, d_weights);
  g.d_input = params.value_proj.backward(cache.input, d_value);
  g.d_refs = std::move(d_refs);
  return g;
}

Point2 init_direction(int head) {
  static constexpr double kDirs[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};
  const int i = ((head % 8) + 8) % 8;
  return {kDirs[i][0], kDirs[i][1]};
}

DeformAttnParams init_deform_params(const AttnConfig& cfg, bool refinement_mode, Rng& rng) {
  cfg.validate();
  const int mlk = cfg.heads * cfg.levels * cfg.points;
  DeformAttnParams p;
  p.value_proj = Linear::xavier(cfg.channels, cfg.inner_dim(), rng);
  p.output_proj = Linear::xavier(cfg.inner_dim(), cfg.channels, rng);
  p.sampling_offsets = Linear(cfg.channels, 2 * mlk);
  p.attention_weights = Linear(cfg.channels, mlk);

  const double refine_scale = 1.0 / (2.0 * cfg.points);
  auto& bias = p.sampling_offsets.bias.value;
  for (int m = 0; m < cfg.heads; ++m) {
    const Point2 dir = init_direction(m);
    for (int l = 0; l < cfg.levels; ++l) {
      for (int k = 0; k < cfg.points; ++k) {
        const int s = (m * cfg.levels + l) * cfg.points + k;
        const double mag = k + 1;
        double bx = dir.x * mag;
        double by = dir.y * mag;
        if (refinement_mode) {
          bx *= refine_scale;
          by *= refine_scale;
        }
        bias(0, 2 * s) = bx;
        bias(0, 2 * s + 1) = by;
      }
    }
  }
  return p;
}

CostModel flop_estimate(const AttnConfig& cfg, std::int64_t n_query, std::span<const LevelShape> levels) {
  if (n_query <= 0 || levels.empty()) throw std::invalid_argument("flop_estimate: sizes must be positive");
  const std::uint64_t nq = static_cast<std::uint64_t>(n_query);
  const std::uint64_t c = static_cast<std::uint64_t>(cfg.channels);
  const std::uint64_t m = static_cast<std::uint64_t>(cfg.heads);
  const std::uint64_t k = static_cast<std::uint64_t>(cfg.points);
  std::uint64_t nk = 0;
  for (const auto& s : levels) {
    if (s.height <= 0 || s.width <= 0) throw std::invalid_argument("flop_estimate: sizes must be positive");
    nk += static_cast<std::uint64_t>(s.size());
  }

  CostModel cm;
  cm.dense.query_proj = nq * c * c;
  cm.dense.key_proj = nk * c * c;
  cm.dense.pairwise = nq * nk * c;
  cm.flops_dense = cm.dense.query_proj + cm.dense.key_proj + cm.dense.pairwise;

  cm.deform.query_proj = nq * c * c;
  for (const auto& s : levels) {
    const std::uint64_t hw = static_cast<std::uint64_t>(s.size());
    cm.deform.value_proj += std::min(hw * c * c, nq * k * c * c);
    cm.deform.sampling += 5 * nq * k * c;
    cm.deform.sampling_params += 3 * nq * c * m * k;
  }
  cm.flops_deform =
      cm.deform.query_proj + cm.deform.value_proj + cm.deform.sampling + cm.deform.sampling_params;
  return cm;
}

}  // namespace ddetr
