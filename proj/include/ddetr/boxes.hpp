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

#include "ddetr/attention.hpp"
#include "ddetr/kernels.hpp"
#include "ddetr/layers.hpp"

namespace ddetr {

/// Normalized (cx, cy, w, h), relative to the image size.
struct BoxN {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
};

/// Unconstrained head outputs, interpreted in sigmoid-logit space.
struct RawBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
};

/// Center is the reference point moved in logit space; size is sigmoid(raw).
BoxN decode_box(Point2 reference, const RawBox& raw);

/// d box / d raw and d box.center / d reference (inverse-sigmoid clamp respected).
struct DecodeJacobian {
  RawBox d_raw;         // diagonal entries: d cx/d x, d cy/d y, d w/d w, d h/d h
  Point2 d_reference;   // d cx / d ref.x, d cy / d ref.y
};
DecodeJacobian decode_box_jacobian(Point2 reference, const RawBox& raw);

/// Each coordinate moves in logit space from the previous box. Gradients flow to
/// `deltas` only; see refine_box_jacobian.
BoxN refine_box(const BoxN& prev, const RawBox& deltas);
/// Diagonal d output / d deltas. The previous box is treated as a constant.
RawBox refine_box_jacobian(const BoxN& prev, const RawBox& deltas);

inline constexpr double kInitialBoxSize = 0.1;
BoxN initial_box(Point2 reference, double size = kInitialBoxSize);

/// Offsets rescaled by the previous box size, to be placed in normalized units around
/// (prev.cx, prev.cy). Returns the modulated plan; pair it with box_references(prev).
SamplingPlan modulate_offsets(const SamplingPlan& plan, std::span<const BoxN> prev);

/// [N, 4] reference rows (cx, cy, w, h) for ReferenceKind::Box sampling.
Mat box_references(std::span<const BoxN> boxes);

// ---------------------------------------------------------------------------
// Two-stage proposals.

struct Proposal {
  BoxN box;
  double score = 0.0;   // foreground probability
  double logit = 0.0;
  int level = 0;        // 0-based level index
  Point2 reference;     // the pixel's own normalized coordinates
  int index = 0;        // flattened token index
};

inline constexpr double kProposalBaseScale = 0.05;

/// Box regression (3-layer FFN) and binary foreground classification applied to every
/// encoder output token.
struct ProposalHead {
  Mlp box;
  Linear cls;

  static ProposalHead init(int channels, Rng& rng);
  void collect(ParamList& out, const std::string& prefix);
};

/// Size prior for a 0-based level: 2^(level+1) * base_scale.
double proposal_size_prior(int level, double base_scale = kProposalBaseScale);

/// Decode one proposal from raw deltas.
BoxN decode_proposal(Point2 reference, int level, const RawBox& raw, double base_scale = kProposalBaseScale);

struct ProposalCache {
  Mat memory;
  Mlp::Cache box;
  Mat raw;    // [N, 4]
  Mat logit;  // [N, 1]
};

std::vector<Proposal> propose_first_stage(const FlatFeatures& memory, const ProposalHead& head,
                                          double base_scale = kProposalBaseScale, ProposalCache* cache = nullptr,
                                          MacCounter* macs = nullptr);

/// Highest scores first; equal scores keep lower token index first. Throws if k > count.
std::vector<Proposal> top_k_proposals(std::span<const Proposal> proposals, int k);

}  // namespace ddetr
