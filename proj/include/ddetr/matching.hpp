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

#include <utility>
#include <vector>

#include "ddetr/common.hpp"

namespace ddetr {

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query, ground truth), sorted by ground truth
  double total_cost = 0.0;
};

/// Minimum-cost injective assignment of every ground-truth column to a distinct query row.
///
/// `cost` is [N, G] with G <= N; throws std::invalid_argument when G > N or on a
/// non-finite entry. Shortest augmenting paths with dual potentials, O(G^2 N).
MatchResult hungarian_match(const Mat& cost);

}  // namespace ddetr
