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
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ddetr {

/// Row-major dense matrix. Token sets are stored as [N, C] with one token per row.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

using Rng = std::mt19937_64;

/// A learnable array with its accumulated gradient.
struct Parameter {
  Mat value;
  Mat grad;

  Parameter() = default;
  explicit Parameter(Mat v) : value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

/// Named handle used by optimizers, checkpoints and gradient checks.
struct ParamRef {
  std::string name;
  Parameter* param = nullptr;
  double lr_scale = 1.0;
  bool decay = true;
};

using ParamList = std::vector<ParamRef>;

/// Instrumented multiply-accumulate counter. Ops take it as an optional out-parameter.
struct MacCounter {
  std::uint64_t macs = 0;
  void add(std::uint64_t n) { macs += n; }
};

inline void count(MacCounter* counter, std::uint64_t n) {
  if (counter != nullptr) counter->add(n);
}

Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);
Mat uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);
/// Glorot/Xavier uniform for a [fan_out, fan_in] weight.
Mat xavier_uniform(Eigen::Index fan_out, Eigen::Index fan_in, Rng& rng);

}  // namespace ddetr
