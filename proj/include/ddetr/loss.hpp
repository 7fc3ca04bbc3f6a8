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

#include <array>
#include <span>
#include <vector>

#include "ddetr/boxes.hpp"
#include "ddetr/matching.hpp"

namespace ddetr {

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

/// Classification and box term weights, shared by the matching cost and the loss.
struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// Sigmoid focal loss of one logit against a {0, 1} target; writes d loss / d logit.
double sigmoid_focal_loss(double logit, double target, const FocalParams& fp, double* d_logit = nullptr);

double box_iou(const BoxN& a, const BoxN& b);

/// Generalized IoU in (-1, 1].
double generalized_iou(const BoxN& a, const BoxN& b);
/// GIoU plus its gradient w.r.t. `pred` as (cx, cy, w, h).
double generalized_iou_grad(const BoxN& pred, const BoxN& target, std::array<double, 4>& d_pred);

struct GroundTruthBox {
  int cls = 0;
  BoxN box;
};

/// One decoder layer's (or the proposal stage's) predictions.
struct LayerPrediction {
  Mat logits;  // [N, num_classes]
  std::vector<BoxN> boxes;
};

/// [N, G] cost: focal-style class cost + L1 + (-GIoU), weighted like the loss.
Mat matching_cost(const LayerPrediction& pred, std::span<const GroundTruthBox> gt, const LossWeights& w,
                  const FocalParams& fp);

struct LossTerms {
  double total = 0.0;
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;

  LossTerms& operator+=(const LossTerms& o) {
    total += o.total;
    cls += o.cls;
    l1 += o.l1;
    giou += o.giou;
    return *this;
  }
};

struct SetLossResult {
  LossTerms terms;                   // weighted, summed over layers
  std::vector<MatchResult> matches;  // per layer
  std::vector<Mat> d_logits;         // per layer, [N, num_classes]
  std::vector<Mat> d_boxes;          // per layer, [N, 4] w.r.t. (cx, cy, w, h)
};

/// Hungarian set loss summed over layers (auxiliary supervision). Unmatched queries are
/// pushed toward background by the focal term. Terms are normalized by max(G, 1).
SetLossResult set_loss(std::span<const LayerPrediction> layers, std::span<const GroundTruthBox> gt,
                       const LossWeights& w = {}, const FocalParams& fp = {});

}  // namespace ddetr
