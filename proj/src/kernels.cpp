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

#include "ddetr/kernels.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace ddetr {

Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat xavier_uniform(Eigen::Index fan_out, Eigen::Index fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_matrix(fan_out, fan_in, bound, rng);
}

FeatureMap FeatureMap::from_tokens(const Mat& tokens, int h, int w, int level) {
  if (tokens.rows() != static_cast<Eigen::Index>(h) * w) {
    throw std::invalid_argument("FeatureMap::from_tokens: token count does not match H*W");
  }
  FeatureMap map;
  map.data = tokens.transpose();
  map.height = h;
  map.width = w;
  map.level_id = level;
  return map;
}

BilinearStencil BilinearStencil::at(double x, double y, int height, int width) {
  BilinearStencil s;
  const double x0f = std::ceil(x) - 1.0;
  const double y0f = std::ceil(y) - 1.0;
  const double fx = x - x0f;  // in (0, 1]
  const double fy = y - y0f;
  const double gx = 1.0 - fx;
  const double gy = 1.0 - fy;

  // Corner order: (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1).
  s.weight = {gx * gy, fx * gy, gx * fy, fx * fy};
  s.dweight_dx = {-gy, gy, -fy, fy};
  s.dweight_dy = {-gx, -fx, gx, fx};

  // Far outside the map the integer conversion below would overflow.
  const bool far = !(x0f > -2.0 && x0f < width + 1.0 && y0f > -2.0 && y0f < height + 1.0);
  if (far) {
    s.valid = {false, false, false, false};
    return s;
  }
  const int x0 = static_cast<int>(x0f);
  const int y0 = static_cast<int>(y0f);
  const std::array<int, 4> xs = {x0, x0 + 1, x0, x0 + 1};
  const std::array<int, 4> ys = {y0, y0, y0 + 1, y0 + 1};
  for (int i = 0; i < 4; ++i) {
    s.valid[i] = xs[i] >= 0 && xs[i] < width && ys[i] >= 0 && ys[i] < height;
    s.index[i] = s.valid[i] ? ys[i] * width + xs[i] : 0;
  }
  return s;
}

std::vector<double> bilinear_sample(const FeatureMap& map, Point2 p) {
  const auto s = BilinearStencil::at(p.x, p.y, map.height, map.width);
  std::vector<double> out(map.channels(), 0.0);
  for (int i = 0; i < 4; ++i) {
    if (!s.valid[i]) continue;
    for (int c = 0; c < map.channels(); ++c) out[c] += s.weight[i] * map.data(c, s.index[i]);
  }
  return out;
}

BilinearGrad bilinear_sample_grad(const FeatureMap& map, Point2 p, std::span<const double> upstream) {
  if (static_cast<int>(upstream.size()) != map.channels()) {
    throw std::invalid_argument("bilinear_sample_grad: upstream size must equal channel count");
  }
  const auto s = BilinearStencil::at(p.x, p.y, map.height, map.width);
  BilinearGrad g;
  g.grad_map = Mat::Zero(map.data.rows(), map.data.cols());
  for (int i = 0; i < 4; ++i) {
    if (!s.valid[i]) continue;
    for (int c = 0; c < map.channels(); ++c) {
      const double v = map.data(c, s.index[i]);
      g.grad_map(c, s.index[i]) += s.weight[i] * upstream[c];
      g.grad_p.x += s.dweight_dx[i] * v * upstream[c];
      g.grad_p.y += s.dweight_dy[i] * v * upstream[c];
    }
  }
  return g;
}

void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& e : v) {
    e = std::exp(e - mx);
    sum += e;
  }
  for (double& e : v) e /= sum;
}

std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

double inverse_sigmoid(double p, double eps) {
  const double q = std::clamp(p, eps, 1.0 - eps);
  return std::log(q / (1.0 - q));
}

double inverse_sigmoid_grad(double p, double eps) {
  if (p <= eps || p >= 1.0 - eps) return 0.0;
  return 1.0 / (p * (1.0 - p));
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

GradReport finite_diff_check(const std::function<double()>& f, std::span<double> x,
                             std::span<const double> analytic, double step, double abs_floor) {
  if (x.size() != analytic.size()) {
    throw std::invalid_argument("finite_diff_check: analytic gradient size mismatch");
  }
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  GradReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double fp = f();
    x[i] = saved - step;
    const double fm = f();
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::domain_error("finite_diff_check: non-finite function value at entry " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), abs_floor});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
    ++report.n_checked;
  }
  return report;
}

GradReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                             std::span<const double> x, std::span<const double> analytic, double step,
                             double abs_floor) {
  std::vector<double> work(x.begin(), x.end());
  return finite_diff_check([&] { return f(work); }, std::span<double>(work), analytic, step, abs_floor);
}

}  // namespace ddetr
