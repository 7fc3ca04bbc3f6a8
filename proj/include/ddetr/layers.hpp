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

#include <string>

#include "ddetr/common.hpp"

namespace ddetr {

/// y = x W^T + b with W: [out, in], b: [1, out].
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(int in_features, int out_features);  // zero-initialized
  static Linear xavier(int in_features, int out_features, Rng& rng);

  int in_features() const { return static_cast<int>(weight.value.cols()); }
  int out_features() const { return static_cast<int>(weight.value.rows()); }

  Mat forward(const Mat& x, MacCounter* macs = nullptr) const;
  /// Accumulates parameter gradients, returns d/dx.
  Mat backward(const Mat& x, const Mat& d_out);
  void collect(ParamList& out, const std::string& prefix, double lr_scale = 1.0);
};

/// Normalizes each row to zero mean / unit variance, then applies gain and shift.
struct LayerNorm {
  Parameter gamma;
  Parameter beta;
  double eps = 1e-5;

  struct Cache {
    Mat normalized;
    Vec inv_std;
  };

  LayerNorm() = default;
  explicit LayerNorm(int features);

  Mat forward(const Mat& x, Cache* cache = nullptr) const;
  Mat backward(const Cache& cache, const Mat& d_out);
  void collect(ParamList& out, const std::string& prefix);
};

/// Linear -> ReLU -> Linear.
struct FeedForward {
  Linear fc1;
  Linear fc2;

  struct Cache {
    Mat input;
    Mat hidden;  // post-ReLU
  };

  FeedForward() = default;
  FeedForward(int features, int hidden, Rng& rng);

  Mat forward(const Mat& x, Cache* cache = nullptr, MacCounter* macs = nullptr) const;
  Mat backward(const Cache& cache, const Mat& d_out);
  void collect(ParamList& out, const std::string& prefix);
};

/// Multi-layer perceptron with ReLU between layers and no activation on the output.
struct Mlp {
  std::vector<Linear> layers;

  struct Cache {
    std::vector<Mat> inputs;  // input of each layer (post-ReLU for layers > 0)
  };

  Mlp() = default;
  Mlp(int in_features, int hidden, int out_features, int num_layers, Rng& rng);

  Mat forward(const Mat& x, Cache* cache = nullptr, MacCounter* macs = nullptr) const;
  Mat backward(const Cache& cache, const Mat& d_out);
  void collect(ParamList& out, const std::string& prefix);
};

/// 2-d convolution over token-major maps ([H*W, C_in] -> [H_out*W_out, C_out]).
/// Weight columns are ordered (ky, kx, c_in).
struct Conv2d {
  Parameter weight;  // [C_out, k*k*C_in]
  Parameter bias;    // [1, C_out]
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  struct Cache {
    Mat columns;
    int in_height = 0;
    int in_width = 0;
  };

  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng);

  int in_channels() const { return static_cast<int>(weight.value.cols()) / (kernel * kernel); }
  int out_channels() const { return static_cast<int>(weight.value.rows()); }
  int out_size(int in) const { return (in + 2 * padding - kernel) / stride + 1; }

  Mat forward(const Mat& x, int height, int width, Cache* cache = nullptr, MacCounter* macs = nullptr) const;
  Mat backward(const Cache& cache, const Mat& d_out);
  void collect(ParamList& out, const std::string& prefix);

 private:
  Mat im2col(const Mat& x, int height, int width) const;
};

Mat relu(const Mat& x);
/// Zeroes d_out where the forward output was not positive.
Mat relu_backward(const Mat& output, const Mat& d_out);

}  // namespace ddetr
