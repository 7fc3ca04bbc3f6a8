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

#include "ddetr/boxes.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "ddetr/pyramid.hpp"

namespace ddetr {

namespace {
double dsigmoid_from_value(double s) { return s * (1.0 - s); }
}  // namespace

BoxN decode_box(Point2 reference, const RawBox& raw) {
  return {sigmoid(raw.x + inverse_sigmoid(reference.x)), sigmoid(raw.y + inverse_sigmoid(reference.y)),
          sigmoid(raw.w), sigmoid(raw.h)};
}

DecodeJacobian decode_box_jacobian(Point2 reference, const RawBox& raw) {
  const BoxN b = decode_box(reference, raw);
  DecodeJacobian j;
  j.d_raw = {dsigmoid_from_value(b.cx), dsigmoid_from_value(b.cy), dsigmoid_from_value(b.w),
             dsigmoid_from_value(b.h)};
  j.d_reference = {j.d_raw.x * inverse_sigmoid_grad(reference.x), j.d_raw.y * inverse_sigmoid_grad(reference.y)};
  return j;
}

BoxN refine_box(const BoxN& prev, const RawBox& deltas) {
  return {sigmoid(deltas.x + inverse_sigmoid(prev.cx)), sigmoid(deltas.y + inverse_sigmoid(prev.cy)),
          sigmoid(deltas.w + inverse_sigmoid(prev.w)), sigmoid(deltas.h + inverse_sigmoid(prev.h))};
}

RawBox refine_box_jacobian(const BoxN& prev, const RawBox& deltas) {
  const BoxN b = refine_box(prev, deltas);
  return {dsigmoid_from_value(b.cx), dsigmoid_from_value(b.cy), dsigmoid_from_value(b.w), dsigmoid_from_value(b.h)};
}

BoxN initial_box(Point2 reference, double size) { return {reference.x, reference.y, size, size}; }

SamplingPlan modulate_offsets(const SamplingPlan& plan, std::span<const BoxN> prev) {
  if (static_cast<int>(prev.size()) != plan.queries) {
    throw std::invalid_argument("modulate_offsets: one box per query required");
  }
  SamplingPlan out = plan;
  for (int q = 0; q < plan.queries; ++q) {
    for (Eigen::Index j = 0; j < plan.offsets.cols(); j += 2) {
      out.offsets(q, j) *= prev[q].w;
      out.offsets(q, j + 1) *= prev[q].h;
    }
  }
  return out;
}

Mat box_references(std::span<const BoxN> boxes) {
  Mat refs(static_cast<Eigen::Index>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    refs.row(static_cast<Eigen::Index>(i)) << boxes[i].cx, boxes[i].cy, boxes[i].w, boxes[i].h;
  }
  return refs;
}

ProposalHead ProposalHead::init(int channels, Rng& rng) {
  ProposalHead h;
  h.box = Mlp(channels, channels, 4, 3, rng);
  h.cls = Linear::xavier(channels, 1, rng);
  // Last regression layer starts at zero so proposals begin at their priors.
  h.box.layers.back().weight.value.setZero();
  h.box.layers.back().bias.value.setZero();
  // Focal-loss prior: foreground probability 0.01.
  h.cls.bias.value.setConstant(-std::log((1.0 - 0.01) / 0.01));
  return h;
}

void ProposalHead::collect(ParamList& out, const std::string& prefix) {
  box.collect(out, prefix + ".box");
  cls.collect(out, prefix + ".cls");
}

double proposal_size_prior(int level, double base_scale) { return std::ldexp(base_scale, level + 1); }

BoxN decode_proposal(Point2 reference, int level, const RawBox& raw, double base_scale) {
  const double prior = proposal_size_prior(level, base_scale);
  return {sigmoid(raw.x + inverse_sigmoid(reference.x)), sigmoid(raw.y + inverse_sigmoid(reference.y)),
          sigmoid(raw.w + inverse_sigmoid(prior)), sigmoid(raw.h + inverse_sigmoid(prior))};
}

std::vector<Proposal> propose_first_stage(const FlatFeatures& memory, const ProposalHead& head, double base_scale,
                                          ProposalCache* cache, MacCounter* macs) {
  ProposalCache local;
  ProposalCache& c = cache != nullptr ? *cache : local;
  c.memory = memory.tokens;
  c.raw = head.box.forward(memory.tokens, &c.box, macs);
  c.logit = head.cls.forward(memory.tokens, macs);

  const Mat refs = encoder_reference_points(memory.shapes);
  std::vector<Proposal> out;
  out.reserve(static_cast<std::size_t>(memory.tokens.rows()));
  int index = 0;
  for (int l = 0; l < memory.num_levels(); ++l) {
    for (int t = 0; t < memory.shapes[l].size(); ++t, ++index) {
      Proposal p;
      p.reference = {refs(index, 0), refs(index, 1)};
      p.level = l;
      p.index = index;
      const RawBox raw{c.raw(index, 0), c.raw(index, 1), c.raw(index, 2), c.raw(index, 3)};
      p.box = decode_proposal(p.reference, l, raw, base_scale);
      p.logit = c.logit(index, 0);
      p.score = sigmoid(p.logit);
      out.push_back(p);
    }
  }
  return out;
}

std::vector<Proposal> top_k_proposals(std::span<const Proposal> proposals, int k) {
  if (k < 0 || k > static_cast<int>(proposals.size())) {
    throw std::invalid_argument("top_k_proposals: k exceeds proposal count");
  }
  std::vector<Proposal> sorted(proposals.begin(), proposals.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const Proposal& a, const Proposal& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  sorted.resize(static_cast<std::size_t>(k));
  return sorted;
}

}  // namespace ddetr
