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

#include "ddetr/evaluation.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "ddetr/loss.hpp"

namespace ddetr {

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

double average_precision(std::span<const DetectionRecord> dets, std::span<const DetectionRecord> gts,
                         double iou_threshold, const std::vector<bool>& ignore_gt,
                         const std::vector<bool>& ignore_det) {
  const auto gt_ignored = [&](std::size_t g) { return !ignore_gt.empty() && ignore_gt[g]; };
  std::size_t n_pos = 0;
  for (std::size_t g = 0; g < gts.size(); ++g) n_pos += gt_ignored(g) ? 0 : 1;
  if (n_pos == 0) return -1.0;

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<bool> taken(gts.size(), false);
  std::vector<int> hits;  // 1 true positive, 0 false positive, per counted detection
  for (std::size_t i : order) {
    const auto& d = dets[i];
    // Prefer counted ground truths; fall back to ignored ones.
    int best = -1;
    double best_iou = iou_threshold;
    bool best_ignored = true;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].image_id != d.image_id) continue;
      const bool ig = gt_ignored(g);
      if (best >= 0 && !best_ignored && ig) continue;
      const double iou = box_iou(d.box, gts[g].box);
      if (iou < iou_threshold) continue;
      if (best < 0 || (best_ignored && !ig) || iou > best_iou) {
        best = static_cast<int>(g);
        best_iou = iou;
        best_ignored = ig;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      if (!best_ignored) hits.push_back(1);
      continue;
    }
    if (!ignore_det.empty() && ignore_det[i]) continue;
    hits.push_back(0);
  }

  std::vector<double> recall;
  std::vector<double> precision;
  double tp = 0.0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    tp += hits[k];
    recall.push_back(tp / static_cast<double>(n_pos));
    precision.push_back(tp / static_cast<double>(k + 1));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

namespace {

enum class Bucket { All, Small, Medium, Large };

bool in_bucket(double area, Bucket b) {
  switch (b) {
    case Bucket::All:
      return true;
    case Bucket::Small:
      return area < kSmallArea;
    case Bucket::Medium:
      return area >= kSmallArea && area <= kLargeArea;
    case Bucket::Large:
      return area > kLargeArea;
  }
  return true;
}

// Mean over classes with counted ground truth; -1 when none.
double class_mean_ap(std::span<const DetectionRecord> dets, std::span<const DetectionRecord> gts, double thr,
                     Bucket bucket) {
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.cls);
  double sum = 0.0;
  int n = 0;
  for (int c : classes) {
    std::vector<DetectionRecord> d;
    std::vector<DetectionRecord> g;
    std::vector<bool> ig;
    std::vector<bool> id;
    for (const auto& r : dets) {
      if (r.cls != c) continue;
      d.push_back(r);
      id.push_back(!in_bucket(r.box.area(), bucket));
    }
    for (const auto& r : gts) {
      if (r.cls != c) continue;
      g.push_back(r);
      ig.push_back(!in_bucket(r.box.area(), bucket));
    }
    const double ap = average_precision(d, g, thr, ig, id);
    if (ap < 0.0) continue;
    sum += ap;
    ++n;
  }
  return n > 0 ? sum / n : -1.0;
}

double mean_over_thresholds(std::span<const DetectionRecord> dets, std::span<const DetectionRecord> gts,
                            std::span<const double> thresholds, Bucket bucket, std::vector<double>* per) {
  double sum = 0.0;
  for (double t : thresholds) {
    const double ap = class_mean_ap(dets, gts, t, bucket);
    if (ap < 0.0) return -1.0;
    if (per != nullptr) per->push_back(ap);
    sum += ap;
  }
  return sum / static_cast<double>(thresholds.size());
}

}  // namespace

ApSummary compute_ap(std::span<const DetectionRecord> dets, std::span<const DetectionRecord> gts,
                     std::span<const double> iou_thresholds) {
  ApSummary s;
  s.thresholds = iou_thresholds.empty() ? coco_iou_thresholds()
                                        : std::vector<double>(iou_thresholds.begin(), iou_thresholds.end());
  if (gts.empty()) {
    s.ap = s.ap50 = s.ap75 = s.ap_small = s.ap_medium = s.ap_large = -1.0;
    return s;
  }
  s.ap = mean_over_thresholds(dets, gts, s.thresholds, Bucket::All, &s.per_threshold);
  s.ap50 = class_mean_ap(dets, gts, 0.5, Bucket::All);
  s.ap75 = class_mean_ap(dets, gts, 0.75, Bucket::All);
  s.ap_small = mean_over_thresholds(dets, gts, s.thresholds, Bucket::Small, nullptr);
  s.ap_medium = mean_over_thresholds(dets, gts, s.thresholds, Bucket::Medium, nullptr);
  s.ap_large = mean_over_thresholds(dets, gts, s.thresholds, Bucket::Large, nullptr);
  return s;
}

void write_records(std::ostream& os, std::span<const DetectionRecord> records, bool with_score) {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["image_id"] = r.image_id;
    j["class"] = r.cls;
    j["cx"] = r.box.cx;
    j["cy"] = r.box.cy;
    j["w"] = r.box.w;
    j["h"] = r.box.h;
    if (with_score) j["score"] = r.score;
    os << j.dump() << '\n';
  }
}

std::vector<DetectionRecord> read_records(std::istream& is) {
  std::vector<DetectionRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DetectionRecord r;
      r.image_id = j.at("image_id");
      r.cls = j.at("class");
      r.box = {j.at("cx"), j.at("cy"), j.at("w"), j.at("h")};
      r.score = j.value("score", 1.0);
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("record line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ddetr
