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

#include <string>

#include "ddetr/attention.hpp"
#include "ddetr/layers.hpp"

namespace ddetr {

/// Which operator fills the encoder self-attention and decoder cross-attention slots.
enum class AttentionKind { Deformable, Dense };

/// Post-norm encoder layer: x = LN(x + Attn(x + pos)); x = LN(x + FFN(x)).
///
/// With AttentionKind::Deformable every token samples around its own location; with
/// AttentionKind::Dense it attends to all tokens (keys x + pos, values x).
struct EncoderLayer {
  AttentionKind kind = AttentionKind::Deformable;
  DeformAttnParams deform;
  DenseAttnParams dense;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;

  struct Cache {
    Mat query;
    MsDeformCache deform;
    MhaCache dense;
    LayerNorm::Cache norm1;
    FeedForward::Cache ffn;
    LayerNorm::Cache norm2;
  };

  struct Grads {
    Mat d_src;
    Mat d_pos;
  };

  static EncoderLayer init(const AttnConfig& cfg, int ffn_hidden, AttentionKind kind, Rng& rng);

  /// `refs` are the tokens' own normalized coordinates, [N, 2]; unused by dense attention.
  Mat forward(const FlatFeatures& src, const Mat& pos, const Mat& refs, const AttnConfig& cfg,
              ExecutionOrder order = ExecutionOrder::Auto, Cache* cache = nullptr, MacCounter* macs = nullptr) const;
  Grads backward(const AttnConfig& cfg, const Cache& cache, const Mat& d_out);
  void collect(ParamList& out, const std::string& prefix, double offset_lr_scale);
};

/// Post-norm decoder layer: dense self-attention over queries, cross-attention into the
/// encoder memory at each query's reference, then the FFN.
struct DecoderLayer {
  AttentionKind kind = AttentionKind::Deformable;
  DenseAttnParams self_attn;
  LayerNorm norm1;
  DeformAttnParams cross_deform;
  DenseAttnParams cross_dense;
  LayerNorm norm2;
  FeedForward ffn;
  LayerNorm norm3;

  struct Cache {
    MhaCache self_attn;
    LayerNorm::Cache norm1;
    MsDeformCache cross_deform;
    MhaCache cross_dense;
    LayerNorm::Cache norm2;
    FeedForward::Cache ffn;
    LayerNorm::Cache norm3;
  };

  struct Grads {
    Mat d_tgt;
    Mat d_query_pos;
    Mat d_refs;
    Mat d_memory;
    Mat d_memory_pos;  // dense cross-attention only
  };

  static DecoderLayer init(const AttnConfig& cfg, int ffn_hidden, AttentionKind kind, bool refinement_mode,
                           Rng& rng);

  /// `refs` follow `ref_kind` (Normalized [N, 2] or Box [N, 4]). `memory_pos` is the
  /// per-token positional + level embedding, used as key offset by dense cross-attention.
  Mat forward(const Mat& tgt, const Mat& query_pos, const Mat& refs, ReferenceKind ref_kind,
              const FlatFeatures& memory, const Mat& memory_pos, const AttnConfig& cfg,
              ExecutionOrder order = ExecutionOrder::Auto, Cache* cache = nullptr, MacCounter* macs = nullptr) const;
  Grads backward(const AttnConfig& cfg, const Cache& cache, const Mat& d_out);
  void collect(ParamList& out, const std::string& prefix, double offset_lr_scale);
};

/// sigmoid(query_pos W^T + b): [N, 2] in (0, 1)^2.
Mat predict_reference_points(const Mat& query_pos, const Linear& proj, MacCounter* macs = nullptr);
/// Accumulates `proj` gradients and returns d/d query_pos. `refs` is the forward output.
Mat predict_reference_points_backward(Linear& proj, const Mat& query_pos, const Mat& refs, const Mat& d_refs);

}  // namespace ddetr
