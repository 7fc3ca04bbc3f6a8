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

#include "ddetr/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace ddetr {

MatchResult hungarian_match(const Mat& cost) {
  const int n_query = static_cast<int>(cost.rows());
  const int n_gt = static_cast<int>(cost.cols());
  if (n_gt > n_query) throw std::invalid_argument("hungarian_match: more ground truths than queries");
  if (!cost.allFinite()) throw std::invalid_argument("hungarian_match: non-finite cost");

  MatchResult result;
  if (n_gt == 0) return result;

  // Rows of the working problem are ground truths (the smaller side), columns are queries.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n_gt + 1, 0.0), v(n_query + 1, 0.0);
  std::vector<int> owner(n_query + 1, 0), way(n_query + 1, 0);
  std::vector<double> min_slack(n_query + 1);
  std::vector<char> used(n_query + 1);

  for (int row = 1; row <= n_gt; ++row) {
    owner[0] = row;
    int col0 = 0;
    std::fill(min_slack.begin(), min_slack.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[col0] = 1;
      const int row0 = owner[col0];
      double delta = inf;
      int col1 = 0;
      for (int col = 1; col <= n_query; ++col) {
        if (used[col]) continue;
        const double cur = cost(col - 1, row0 - 1) - u[row0] - v[col];
        if (cur < min_slack[col]) {
          min_slack[col] = cur;
          way[col] = col0;
        }
        if (min_slack[col] < delta) {
          delta = min_slack[col];
          col1 = col;
        }
      }
      for (int col = 0; col <= n_query; ++col) {
        if (used[col]) {
          u[owner[col]] += delta;
          v[col] -= delta;
        } else {
          min_slack[col] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const int col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }

  std::vector<int> query_of(n_gt, -1);
  for (int col = 1; col <= n_query; ++col) {
    if (owner[col] != 0) query_of[owner[col] - 1] = col - 1;
  }
  for (int g = 0; g < n_gt; ++g) {
    result.pairs.emplace_back(query_of[g], g);
    result.total_cost += cost(query_of[g], g);
  }
  return result;
}

}  // namespace ddetr
