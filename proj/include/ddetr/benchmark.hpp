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

#include "ddetr/model.hpp"

namespace ddetr {

/// One measured attention block at one input size.
struct BenchRow {
  std::string config;  // "encoder_dense", "encoder_deform" or "decoder_deform"
  int image_size = 0;
  int n_query = 0;
  int hw = 0;  // total key tokens over all levels
  std::uint64_t flops_dense = 0;   // cost-model estimates for this (N_q, HW)
  std::uint64_t flops_deform = 0;
  std::uint64_t measured_macs = 0;
  double wall_seconds = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double exponent_dense = 0.0;   // log-log slope of measured MACs against HW
  double exponent_deform = 0.0;
  double decoder_spread = 0.0;   // (max - min) / mean of decoder MACs over the sweep
};

/// Level shapes the backbone produces for a square image.
std::vector<LevelShape> pyramid_shapes(int image_size, int levels);

/// Least-squares slope of log(y) against log(x).
double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Runs encoder self-attention (dense and deformable, N_q = HW) and decoder deformable
/// cross-attention (N_q = cfg.queries, automatic execution order) on random features
/// for each image size. Needs at least four sizes.
BenchReport benchmark(const ModelConfig& cfg, const std::vector<int>& image_sizes, std::uint64_t seed = 1);

std::string bench_to_json(const BenchReport& report);

}  // namespace ddetr
