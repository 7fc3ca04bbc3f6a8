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

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ddetr/boxes.hpp"

namespace ddetr {

/// One interchange record. Ground truths carry no score.
struct DetectionRecord {
  int image_id = 0;
  int cls = 0;
  BoxN box;
  double score = 1.0;
};

/// Area thresholds as fractions of the image area.
inline constexpr double kSmallArea = 0.01;
inline constexpr double kLargeArea = 0.10;

struct ApSummary {
  double ap = 0.0;    // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  std::vector<double> thresholds;
  std::vector<double> per_threshold;
};

/// 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

/// Average precision for one class at one IoU threshold over a set of images.
///
/// Detections are ranked by score (stable for ties) and greedily matched to the unmatched
/// ground truth of highest IoU in the same image. AP is the area under the
/// monotone precision envelope. Ground truths flagged in `ignore_gt` can absorb a
/// detection without counting as a hit or miss; detections flagged in `ignore_det`
/// that stay unmatched are dropped. Returns -1 when there is no counted ground truth.
double average_precision(std::span<const DetectionRecord> dets, std::span<const DetectionRecord> gts,
                         double iou_threshold, const std::vector<bool>& ignore_gt = {},
                         const std::vector<bool>& ignore_det = {});

/// Class-averaged AP summary. Classes without ground truth are skipped; a bucket with
/// no ground truth at all reports -1.
ApSummary compute_ap(std::span<const DetectionRecord> dets, std::span<const DetectionRecord> gts,
                     std::span<const double> iou_thresholds = {});

/// Line-delimited JSON {image_id, class, cx, cy, w, h, score?}.
void write_records(std::ostream& os, std::span<const DetectionRecord> records, bool with_score);
std::vector<DetectionRecord> read_records(std::istream& is);

}  // namespace ddetr
