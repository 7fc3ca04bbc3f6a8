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
#include <cmath>
#include <functional>
#include <span>

#include "ddetr/common.hpp"

namespace ddetr {

/// Dense C x H x W map. `data` holds one channel per row, pixels row-major within a row.
struct FeatureMap {
  Mat data;
  int height = 0;
  int width = 0;
  int level_id = 0;

  FeatureMap() = default;
  FeatureMap(int channels, int h, int w, int level = 0)
      : data(Mat::Zero(channels, static_cast<Eigen::Index>(h) * w)), height(h), width(w), level_id(level) {}

  int channels() const { return static_cast<int>(data.rows()); }
  double& at(int c, int y, int x) { return data(c, static_cast<Eigen::Index>(y) * width + x); }
  double at(int c, int y, int x) const { return data(c, static_cast<Eigen::Index>(y) * width + x); }

  /// Token-major copy, [H*W, C].
  Mat tokens() const { return data.transpose(); }
  static FeatureMap from_tokens(const Mat& tokens, int h, int w, int level = 0);
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct GradReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  int n_checked = 0;
};

/// The four integer neighbours of a fractional location and their interpolation weights.
///
/// Pixel (i, j) sits at continuous coordinate (i, j). The cell is chosen as
/// x0 = ceil(x) - 1, so a point lying exactly on a gridline belongs to the cell on
/// its left/top; the spatial derivative there is that cell's one-sided derivative.
/// Neighbours outside the map are flagged invalid and read as zero.
struct BilinearStencil {
  std::array<int, 4> index{};    // flattened y * W + x, only meaningful when valid
  std::array<bool, 4> valid{};
  std::array<double, 4> weight{};
  std::array<double, 4> dweight_dx{};
  std::array<double, 4> dweight_dy{};

  static BilinearStencil at(double x, double y, int height, int width);
};

std::vector<double> bilinear_sample(const FeatureMap& map, Point2 p);

struct BilinearGrad {
  Mat grad_map;  // [C, H*W]
  Point2 grad_p;
};

BilinearGrad bilinear_sample_grad(const FeatureMap& map, Point2 p, std::span<const double> upstream);

/// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> v);
void softmax_inplace(std::span<double> v);

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline constexpr double kInverseSigmoidEps = 1e-5;

/// log(p' / (1 - p')) with p' = clamp(p, eps, 1 - eps).
double inverse_sigmoid(double p, double eps = kInverseSigmoidEps);
/// d inverse_sigmoid / dp; zero where the clamp is active.
double inverse_sigmoid_grad(double p, double eps = kInverseSigmoidEps);

/// log(1 + exp(x)) without overflow.
double softplus(double x);

/// Central-difference gradient check.
///
/// `f` is evaluated after perturbing `x` in place; every entry is restored before
/// returning. Relative error per entry is |a - n| / max(|a|, |n|, abs_floor).
/// Throws std::domain_error when `f` returns a non-finite value.
GradReport finite_diff_check(const std::function<double()>& f, std::span<double> x,
                             std::span<const double> analytic, double step, double abs_floor = 1e-6);

/// Value-semantics overload: `f` receives a perturbed copy of `x`.
GradReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                             std::span<const double> x, std::span<const double> analytic, double step,
                             double abs_floor = 1e-6);

}  // namespace ddetr
