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

#include "ddetr/transformer.hpp"

#include <stdexcept>

#include "ddetr/kernels.hpp"

namespace ddetr {

EncoderLayer EncoderLayer::init(const AttnConfig& cfg, int ffn_hidden, AttentionKind kind, Rng& rng) {
  EncoderLayer e;
  e.kind = kind;
  if (kind == AttentionKind::Deformable) {
    e.deform = init_deform_params(cfg, false, rng);
  } else {
    e.dense = DenseAttnParams::init(cfg, rng);
  }
  e.norm1 = LayerNorm(cfg.channels);
  e.ffn = FeedForward(cfg.channels, ffn_hidden, rng);
  e.norm2 = LayerNorm(cfg.channels);
  return e;
}

Mat EncoderLayer::forward(const FlatFeatures& src, const Mat& pos, const Mat& refs, const AttnConfig& cfg,
                          ExecutionOrder order, Cache* cache, MacCounter* macs) const {
  if (pos.rows() != src.tokens.rows() || pos.cols() != src.tokens.cols()) {
    throw std::invalid_argument("encoder layer: positional embedding shape mismatch");
  }
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  c.query = src.tokens + pos;
  Mat attn;
  if (kind == AttentionKind::Deformable) {
    attn = ms_deform_attn(c.query, refs, ReferenceKind::Normalized, src, deform, cfg, order,
                          cache != nullptr ? &c.deform : nullptr, macs);
  } else {
    attn = multi_head_attn(c.query, c.query, src.tokens, dense, cfg, cache != nullptr ? &c.dense : nullptr, macs);
  }
  const Mat x1 = norm1.forward(src.tokens + attn, &c.norm1);
  return norm2.forward(x1 + ffn.forward(x1, &c.ffn, macs), &c.norm2);
}

EncoderLayer::Grads EncoderLayer::backward(const AttnConfig& cfg, const Cache& cache, const Mat& d_out) {
  Mat d_x1 = norm2.backward(cache.norm2, d_out);
  d_x1 += ffn.backward(cache.ffn, d_x1);
  const Mat d_sum = norm1.backward(cache.norm1, d_x1);

  Grads g;
  g.d_src = d_sum;
  if (kind == AttentionKind::Deformable) {
    MsDeformGrads a = ms_deform_attn_backward(deform, cfg, cache.deform, d_sum);
    g.d_src += a.d_input + a.d_query;
    g.d_pos = std::move(a.d_query);
  } else {
    MhaGrads a = multi_head_attn_backward(dense, cfg, cache.dense, d_sum);
    g.d_pos = a.d_queries + a.d_keys;
    g.d_src += g.d_pos + a.d_values;
  }
  return g;
}

void EncoderLayer::collect(ParamList& out, const std::string& prefix, double offset_lr_scale) {
  if (kind == AttentionKind::Deformable) {
    deform.collect(out, prefix + ".self_attn", offset_lr_scale);
  } else {
    dense.collect(out, prefix + ".self_attn");
  }
  norm1.collect(out, prefix + ".norm1");
  ffn.collect(out, prefix + ".ffn");
  norm2.collect(out, prefix + ".norm2");
}

DecoderLayer DecoderLayer::init(const AttnConfig& cfg, int ffn_hidden, AttentionKind kind, bool refinement_mode,
                                Rng& rng) {
  DecoderLayer d;
  d.kind = kind;
  d.self_attn = DenseAttnParams::init(cfg, rng);
  d.norm1 = LayerNorm(cfg.channels);
  if (kind == AttentionKind::Deformable) {
    d.cross_deform = init_deform_params(cfg, refinement_mode, rng);
  } else {
    d.cross_dense = DenseAttnParams::init(cfg, rng);
  }
  d.norm2 = LayerNorm(cfg.channels);
  d.ffn = FeedForward(cfg.channels, ffn_hidden, rng);
  d.norm3 = LayerNorm(cfg.channels);
  return d;
}

Mat DecoderLayer::forward(const Mat& tgt, const Mat& query_pos, const Mat& refs, ReferenceKind ref_kind,
                          const FlatFeatures& memory, const Mat& memory_pos, const AttnConfig& cfg,
                          ExecutionOrder order, Cache* cache, MacCounter* macs) const {
  if (query_pos.rows() != tgt.rows() || query_pos.cols() != tgt.cols()) {
    throw std::invalid_argument("decoder layer: query embedding shape mismatch");
  }
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  const bool keep = cache != nullptr;

  const Mat qk = tgt + query_pos;
  const Mat sa = multi_head_attn(qk, qk, tgt, self_attn, cfg, keep ? &c.self_attn : nullptr, macs);
  const Mat t1 = norm1.forward(tgt + sa, &c.norm1);

  const Mat cq = t1 + query_pos;
  Mat ca;
  if (kind == AttentionKind::Deformable) {
    ca = ms_deform_attn(cq, refs, ref_kind, memory, cross_deform, cfg, order, keep ? &c.cross_deform : nullptr, macs);
  } else {
    if (memory_pos.rows() != memory.tokens.rows() || memory_pos.cols() != memory.tokens.cols()) {
      throw std::invalid_argument("decoder layer: memory positional embedding shape mismatch");
    }
    ca = multi_head_attn(cq, memory.tokens + memory_pos, memory.tokens, cross_dense, cfg,
                         keep ? &c.cross_dense : nullptr, macs);
  }
  const Mat t2 = norm2.forward(t1 + ca, &c.norm2);
  return norm3.forward(t2 + ffn.forward(t2, &c.ffn, macs), &c.norm3);
}

DecoderLayer::Grads DecoderLayer::backward(const AttnConfig& cfg, const Cache& cache, const Mat& d_out) {
  Grads g;
  Mat d_t2 = norm3.backward(cache.norm3, d_out);
  d_t2 += ffn.backward(cache.ffn, d_t2);
  const Mat d_s2 = norm2.backward(cache.norm2, d_t2);

  Mat d_t1 = d_s2;
  Mat d_cq;
  if (kind == AttentionKind::Deformable) {
    MsDeformGrads a = ms_deform_attn_backward(cross_deform, cfg, cache.cross_deform, d_s2);
    d_cq = std::move(a.d_query);
    g.d_memory = std::move(a.d_input);
    g.d_refs = std::move(a.d_refs);
  } else {
    MhaGrads a = multi_head_attn_backward(cross_dense, cfg, cache.cross_dense, d_s2);
    d_cq = std::move(a.d_queries);
    g.d_memory = a.d_keys + a.d_values;
    g.d_memory_pos = std::move(a.d_keys);
  }
  d_t1 += d_cq;
  g.d_query_pos = d_cq;

  const Mat d_s1 = norm1.backward(cache.norm1, d_t1);
  MhaGrads s = multi_head_attn_backward(self_attn, cfg, cache.self_attn, d_s1);
  const Mat d_qk = s.d_queries + s.d_keys;
  g.d_tgt = d_s1 + d_qk + s.d_values;
  g.d_query_pos += d_qk;
  return g;
}

void DecoderLayer::collect(ParamList& out, const std::string& prefix, double offset_lr_scale) {
  self_attn.collect(out, prefix + ".self_attn");
  norm1.collect(out, prefix + ".norm1");
  if (kind == AttentionKind::Deformable) {
    cross_deform.collect(out, prefix + ".cross_attn", offset_lr_scale);
  } else {
    cross_dense.collect(out, prefix + ".cross_attn");
  }
  norm2.collect(out, prefix + ".norm2");
  ffn.collect(out, prefix + ".ffn");
  norm3.collect(out, prefix + ".norm3");
}

Mat predict_reference_points(const Mat& query_pos, const Linear& proj, MacCounter* macs) {
  if (proj.out_features() != 2) throw std::invalid_argument("reference projection must have 2 outputs");
  return proj.forward(query_pos, macs).unaryExpr([](double v) { return sigmoid(v); });
}

Mat predict_reference_points_backward(Linear& proj, const Mat& query_pos, const Mat& refs, const Mat& d_refs) {
  const Mat d_logit = d_refs.cwiseProduct(refs.cwiseProduct((1.0 - refs.array()).matrix()));
  return proj.backward(query_pos, d_logit);
}

}  // namespace ddetr
