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

#include "ddetr/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace ddetr {

Linear::Linear(int in_features, int out_features)
    : weight(Mat::Zero(out_features, in_features)), bias(Mat::Zero(1, out_features)) {}

Linear Linear::xavier(int in_features, int out_features, Rng& rng) {
  Linear l(in_features, out_features);
  l.weight = Parameter(xavier_uniform(out_features, in_features, rng));
  return l;
}

Mat Linear::forward(const Mat& x, MacCounter* macs) const {
  if (x.cols() != weight.value.cols()) throw std::invalid_argument("Linear: input width mismatch");
  Mat y(x.rows(), weight.value.rows());
  y.noalias() = x * weight.value.transpose();
  y.rowwise() += bias.value.row(0);
  count(macs, static_cast<std::uint64_t>(x.rows()) * weight.value.rows() * weight.value.cols());
  return y;
}

Mat Linear::backward(const Mat& x, const Mat& d_out) {
  weight.grad.noalias() += d_out.transpose() * x;
  bias.grad.row(0) += d_out.colwise().sum();
  Mat dx(x.rows(), x.cols());
  dx.noalias() = d_out * weight.value;
  return dx;
}

void Linear::collect(ParamList& out, const std::string& prefix, double lr_scale) {
  out.push_back({prefix + ".weight", &weight, lr_scale, true});
  out.push_back({prefix + ".bias", &bias, lr_scale, true});
}

LayerNorm::LayerNorm(int features)
    : gamma(Mat::Ones(1, features)), beta(Mat::Zero(1, features)) {}

Mat LayerNorm::forward(const Mat& x, Cache* cache) const {
  const auto n = x.cols();
  Mat xhat(x.rows(), n);
  Vec inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  Mat y = (xhat.array().rowwise() * gamma.value.row(0).array()).rowwise() + beta.value.row(0).array();
  if (cache != nullptr) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Mat LayerNorm::backward(const Cache& cache, const Mat& d_out) {
  const Mat& xhat = cache.normalized;
  gamma.grad.row(0) += (d_out.array() * xhat.array()).colwise().sum().matrix();
  beta.grad.row(0) += d_out.colwise().sum();
  const double n = static_cast<double>(xhat.cols());
  Mat dxhat = d_out.array().rowwise() * gamma.value.row(0).array();
  Mat dx(xhat.rows(), xhat.cols());
  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / n;
    const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / n;
    dx.row(r) = cache.inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
  }
  return dx;
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", &gamma, 1.0, false});
  out.push_back({prefix + ".beta", &beta, 1.0, false});
}

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

Mat relu_backward(const Mat& output, const Mat& d_out) {
  return (output.array() > 0.0).select(d_out, 0.0);
}

FeedForward::FeedForward(int features, int hidden, Rng& rng)
    : fc1(Linear::xavier(features, hidden, rng)), fc2(Linear::xavier(hidden, features, rng)) {}

Mat FeedForward::forward(const Mat& x, Cache* cache, MacCounter* macs) const {
  Mat h = relu(fc1.forward(x, macs));
  Mat y = fc2.forward(h, macs);
  if (cache != nullptr) {
    cache->input = x;
    cache->hidden = std::move(h);
  }
  return y;
}

Mat FeedForward::backward(const Cache& cache, const Mat& d_out) {
  Mat dh = relu_backward(cache.hidden, fc2.backward(cache.hidden, d_out));
  return fc1.backward(cache.input, dh);
}

void FeedForward::collect(ParamList& out, const std::string& prefix) {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

Mlp::Mlp(int in_features, int hidden, int out_features, int num_layers, Rng& rng) {
  if (num_layers < 1) throw std::invalid_argument("Mlp: need at least one layer");
  for (int i = 0; i < num_layers; ++i) {
    const int in = i == 0 ? in_features : hidden;
    const int out = i == num_layers - 1 ? out_features : hidden;
    layers.push_back(Linear::xavier(in, out, rng));
  }
}

Mat Mlp::forward(const Mat& x, Cache* cache, MacCounter* macs) const {
  if (cache != nullptr) cache->inputs.clear();
  Mat h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (cache != nullptr) cache->inputs.push_back(h);
    h = layers[i].forward(h, macs);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

Mat Mlp::backward(const Cache& cache, const Mat& d_out) {
  Mat d = d_out;
  for (std::size_t i = layers.size(); i-- > 0;) {
    d = layers[i].backward(cache.inputs[i], d);
    if (i > 0) d = relu_backward(cache.inputs[i], d);
  }
  return d;
}

void Mlp::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".layers." + std::to_string(i));
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel_size, int stride_, int padding_, Rng& rng)
    : kernel(kernel_size), stride(stride_), padding(padding_) {
  const int fan_in = kernel * kernel * in_channels;
  // He-normal for ReLU stems.
  weight = Parameter(normal_matrix(out_channels, fan_in, std::sqrt(2.0 / fan_in), rng));
  bias = Parameter(Mat::Zero(1, out_channels));
}

Mat Conv2d::im2col(const Mat& x, int height, int width) const {
  const int cin = static_cast<int>(x.cols());
  const int ho = out_size(height);
  const int wo = out_size(width);
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(kernel) * kernel * cin);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - padding + ky;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - padding + kx;
          if (ix < 0 || ix >= width) continue;
          cols.block(row, (ky * kernel + kx) * cin, 1, cin) = x.row(static_cast<Eigen::Index>(iy) * width + ix);
        }
      }
    }
  }
  return cols;
}

Mat Conv2d::forward(const Mat& x, int height, int width, Cache* cache, MacCounter* macs) const {
  if (x.rows() != static_cast<Eigen::Index>(height) * width || x.cols() != in_channels()) {
    throw std::invalid_argument("Conv2d: input shape mismatch");
  }
  Mat cols = im2col(x, height, width);
  Mat y(cols.rows(), weight.value.rows());
  y.noalias() = cols * weight.value.transpose();
  y.rowwise() += bias.value.row(0);
  count(macs, static_cast<std::uint64_t>(cols.rows()) * weight.value.rows() * weight.value.cols());
  if (cache != nullptr) {
    cache->columns = std::move(cols);
    cache->in_height = height;
    cache->in_width = width;
  }
  return y;
}

Mat Conv2d::backward(const Cache& cache, const Mat& d_out) {
  weight.grad.noalias() += d_out.transpose() * cache.columns;
  bias.grad.row(0) += d_out.colwise().sum();
  Mat dcols(d_out.rows(), weight.value.cols());
  dcols.noalias() = d_out * weight.value;

  const int cin = in_channels();
  const int height = cache.in_height;
  const int width = cache.in_width;
  const int ho = out_size(height);
  const int wo = out_size(width);
  Mat dx = Mat::Zero(static_cast<Eigen::Index>(height) * width, cin);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - padding + ky;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - padding + kx;
          if (ix < 0 || ix >= width) continue;
          dx.row(static_cast<Eigen::Index>(iy) * width + ix) += dcols.block(row, (ky * kernel + kx) * cin, 1, cin);
        }
      }
    }
  }
  return dx;
}

void Conv2d::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight, 1.0, true});
  out.push_back({prefix + ".bias", &bias, 1.0, true});
}

}  // namespace ddetr
