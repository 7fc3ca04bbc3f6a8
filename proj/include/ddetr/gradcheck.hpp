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

#include <cstdint>
#include <string>
#include <vector>

namespace ddetr {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  int instances = 20;
  double step = 1e-5;
  double tolerance = 1e-4;  // on |a - n| / max(|a|, |n|, abs_floor)
  double abs_floor = 1e-4;
};

/// Aggregate over every instance of one checked quantity.
struct GradCheckEntry {
  std::string name;
  int instances = 0;
  int n_checked = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double seconds = 0.0;
  bool passed() const;
};

/// Central-difference checks of ms_deform_attn (query, value input, references of both
/// kinds and every parameter), decode_box and refine_box, the gradient-blocked path
/// between refinement layers of a full model (analytic gradient must be exactly zero and
/// agree with finite differences), and set_loss back through the prediction heads.
GradCheckReport run_gradcheck_suite(const GradCheckOptions& opts = {});

}  // namespace ddetr
