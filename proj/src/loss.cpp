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

#include "ddetr/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ddetr {

double sigmoid_focal_loss(double logit, double target, const FocalParams& fp, double* d_logit) {
  const double p = sigmoid(logit);
  const double log_p = -softplus(-logit);
  const double log_1mp = -softplus(logit);
  // Targets are hard {0, 1}; blend the two branches for generality.
  const double pos = fp.alpha * std::pow(1.0 - p, fp.gamma);
  const double neg = (1.0 - fp.alpha) * std::pow(p, fp.gamma);
  const double loss = -target * pos * log_p - (1.0 - target) * neg * log_1mp;
  if (d_logit != nullptr) {
    // d/dx of -a (1-p)^g log p  =  a (1-p)^g (g p log p - (1 - p))
    // d/dx of -b p^g log(1-p)   =  b p^g (p - g (1-p) log(1-p))
    const double d_pos = pos * (fp.gamma * p * log_p - (1.0 - p));
    const double d_neg = neg * (p - fp.gamma * (1.0 - p) * log_1mp);
    *d_logit = target * d_pos + (1.0 - target) * d_neg;
  }
  return loss;
}

double box_iou(const BoxN& a, const BoxN& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double generalized_iou(const BoxN& a, const BoxN& b) {
  std::array<double, 4> unused{};
  return generalized_iou_grad(a, b, unused);
}

double generalized_iou_grad(const BoxN& pred, const BoxN& target, std::array<double, 4>& d_pred) {
  const double px0 = pred.x0(), px1 = pred.x1(), py0 = pred.y0(), py1 = pred.y1();
  const double tx0 = target.x0(), tx1 = target.x1(), ty0 = target.y0(), ty1 = target.y1();

  const bool in_x0_pred = px0 >= tx0;  // intersection left edge comes from pred
  const bool in_x1_pred = px1 <= tx1;
  const bool in_y0_pred = py0 >= ty0;
  const bool in_y1_pred = py1 <= ty1;
  const double iw_raw = (in_x1_pred ? px1 : tx1) - (in_x0_pred ? px0 : tx0);
  const double ih_raw = (in_y1_pred ? py1 : ty1) - (in_y0_pred ? py0 : ty0);
  const double iw = std::max(0.0, iw_raw);
  const double ih = std::max(0.0, ih_raw);
  const double inter = iw * ih;

  const double ap = pred.w * pred.h;
  const double at = target.w * target.h;
  const double uni = ap + at - inter;

  const bool en_x0_pred = px0 <= tx0;  // enclosing left edge comes from pred
  const bool en_x1_pred = px1 >= tx1;
  const bool en_y0_pred = py0 <= ty0;
  const bool en_y1_pred = py1 >= ty1;
  const double ew = (en_x1_pred ? px1 : tx1) - (en_x0_pred ? px0 : tx0);
  const double eh = (en_y1_pred ? py1 : ty1) - (en_y0_pred ? py0 : ty0);
  const double encl = ew * eh;

  if (!(uni > 0.0) || !(encl > 0.0)) {
    d_pred = {0.0, 0.0, 0.0, 0.0};
    return uni > 0.0 ? inter / uni : 0.0;
  }
  const double giou = inter / uni - (encl - uni) / encl;

  // giou = I/U - 1 + U/E with U = Ap + At - I.
  const double dg_di = (uni + inter) / (uni * uni) - 1.0 / encl;
  const double dg_dap = -inter / (uni * uni) + 1.0 / encl;
  const double dg_de = -uni / (encl * encl);

  // Partials w.r.t. pred edges (x0, x1, y0, y1).
  double d_x0 = 0.0, d_x1 = 0.0, d_y0 = 0.0, d_y1 = 0.0;
  if (iw_raw > 0.0 && ih_raw > 0.0) {
    if (in_x0_pred) d_x0 += dg_di * -ih;
    if (in_x1_pred) d_x1 += dg_di * ih;
    if (in_y0_pred) d_y0 += dg_di * -iw;
    if (in_y1_pred) d_y1 += dg_di * iw;
  }
  d_x0 += dg_dap * -pred.h;
  d_x1 += dg_dap * pred.h;
  d_y0 += dg_dap * -pred.w;
  d_y1 += dg_dap * pred.w;
  if (en_x0_pred) d_x0 += dg_de * -eh;
  if (en_x1_pred) d_x1 += dg_de * eh;
  if (en_y0_pred) d_y0 += dg_de * -ew;
  if (en_y1_pred) d_y1 += dg_de * ew;

  d_pred = {d_x0 + d_x1, d_y0 + d_y1, 0.5 * (d_x1 - d_x0), 0.5 * (d_y1 - d_y0)};
  return giou;
}

namespace {

double l1_distance(const BoxN& a, const BoxN& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

Mat matching_cost(const LayerPrediction& pred, std::span<const GroundTruthBox> gt, const LossWeights& w,
                  const FocalParams& fp) {
  const auto n = pred.logits.rows();
  if (static_cast<Eigen::Index>(pred.boxes.size()) != n) {
    throw std::invalid_argument("matching_cost: logits and boxes disagree on query count");
  }
  Mat cost(n, static_cast<Eigen::Index>(gt.size()));
  for (Eigen::Index q = 0; q < n; ++q) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt[g].cls < 0 || gt[g].cls >= pred.logits.cols()) {
        throw std::invalid_argument("matching_cost: ground-truth class out of range");
      }
      const double p = sigmoid(pred.logits(q, gt[g].cls));
      const double neg = (1.0 - fp.alpha) * std::pow(p, fp.gamma) * -std::log(1.0 - p + 1e-8);
      const double pos = fp.alpha * std::pow(1.0 - p, fp.gamma) * -std::log(p + 1e-8);
      cost(q, static_cast<Eigen::Index>(g)) = w.cls * (pos - neg) + w.l1 * l1_distance(pred.boxes[q], gt[g].box) -
                                             w.giou * generalized_iou(pred.boxes[q], gt[g].box);
    }
  }
  return cost;
}

SetLossResult set_loss(std::span<const LayerPrediction> layers, std::span<const GroundTruthBox> gt,
                       const LossWeights& w, const FocalParams& fp) {
  SetLossResult res;
  const double num_boxes = std::max<double>(1.0, static_cast<double>(gt.size()));
  for (const auto& layer : layers) {
    const auto n = layer.logits.rows();
    const auto n_cls = layer.logits.cols();
    MatchResult match = hungarian_match(matching_cost(layer, gt, w, fp));

    Mat target = Mat::Zero(n, n_cls);
    for (const auto& [q, g] : match.pairs) target(q, gt[g].cls) = 1.0;

    LossTerms terms;
    Mat d_logits(n, n_cls);
    for (Eigen::Index q = 0; q < n; ++q) {
      for (Eigen::Index c = 0; c < n_cls; ++c) {
        double d = 0.0;
        terms.cls += sigmoid_focal_loss(layer.logits(q, c), target(q, c), fp, &d);
        d_logits(q, c) = w.cls * d / num_boxes;
      }
    }
    terms.cls *= w.cls / num_boxes;

    Mat d_boxes = Mat::Zero(n, 4);
    for (const auto& [q, g] : match.pairs) {
      const BoxN& p = layer.boxes[q];
      const BoxN& t = gt[g].box;
      terms.l1 += l1_distance(p, t);
      std::array<double, 4> dg{};
      const double giou = generalized_iou_grad(p, t, dg);
      terms.giou += 1.0 - giou;
      const double diffs[4] = {p.cx - t.cx, p.cy - t.cy, p.w - t.w, p.h - t.h};
      for (int i = 0; i < 4; ++i) {
        d_boxes(q, i) = (w.l1 * sign(diffs[i]) - w.giou * dg[i]) / num_boxes;
      }
    }
    terms.l1 *= w.l1 / num_boxes;
    terms.giou *= w.giou / num_boxes;
    terms.total = terms.cls + terms.l1 + terms.giou;

    res.terms += terms;
    res.matches.push_back(std::move(match));
    res.d_logits.push_back(std::move(d_logits));
    res.d_boxes.push_back(std::move(d_boxes));
  }
  return res;
}

}  // namespace ddetr
