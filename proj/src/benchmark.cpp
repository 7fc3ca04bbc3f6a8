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

#include "ddetr/benchmark.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace ddetr {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

std::vector<LevelShape> pyramid_shapes(int image_size, int levels) {
  std::vector<LevelShape> shapes;
  for (int l = 0; l < levels; ++l) {
    const int stride = 8 << l;
    if (image_size % stride != 0) throw std::invalid_argument("pyramid_shapes: image size not divisible by stride");
    shapes.push_back({image_size / stride, image_size / stride});
  }
  return shapes;
}

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_loglog_slope: need two or more points");
  const auto n = static_cast<double>(x.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  if (den == 0.0) throw std::invalid_argument("fit_loglog_slope: x values are all equal");
  return (n * sxy - sx * sy) / den;
}

BenchReport benchmark(const ModelConfig& cfg, const std::vector<int>& image_sizes, std::uint64_t seed) {
  if (image_sizes.size() < 4) throw std::invalid_argument("benchmark: the sweep needs at least four sizes");
  const AttnConfig attn = cfg.attn();
  Rng rng(seed);
  const DenseAttnParams dense = DenseAttnParams::init(attn, rng);
  const DeformAttnParams deform = init_deform_params(attn, false, rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  BenchReport report;
  std::vector<double> hw, dense_macs, deform_macs, decoder_macs;
  for (const int size : image_sizes) {
    FlatFeatures feats;
    feats.shapes = pyramid_shapes(size, cfg.levels);
    const int t = feats.total_tokens();
    feats.tokens = normal_matrix(t, cfg.channels, 1.0, rng);

    Mat token_refs(t, 2);
    int row = 0;
    for (const auto& s : feats.shapes) {
      for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x, ++row) {
          token_refs(row, 0) = pixel_to_normalized(x, s.width);
          token_refs(row, 1) = pixel_to_normalized(y, s.height);
        }
      }
    }
    Mat query_refs(cfg.queries, 2);
    for (Eigen::Index i = 0; i < query_refs.size(); ++i) query_refs.data()[i] = unit(rng);
    const Mat queries = normal_matrix(cfg.queries, cfg.channels, 1.0, rng);

    const CostModel enc_cost = flop_estimate(attn, t, feats.shapes);
    const CostModel dec_cost = flop_estimate(attn, cfg.queries, feats.shapes);
    auto add_row = [&](const std::string& name, int nq, const CostModel& cm, const MacCounter& mc, double sec) {
      report.rows.push_back({name, size, nq, t, cm.flops_dense, cm.flops_deform, mc.macs, sec});
    };

    MacCounter mc_dense;
    auto t0 = Clock::now();
    multi_head_attn(feats.tokens, feats.tokens, feats.tokens, dense, attn, nullptr, &mc_dense);
    add_row("encoder_dense", t, enc_cost, mc_dense, seconds_since(t0));

    MacCounter mc_deform;
    t0 = Clock::now();
    ms_deform_attn(feats.tokens, token_refs, ReferenceKind::Normalized, feats, deform, attn,
                   ExecutionOrder::ProjectThenSample, nullptr, &mc_deform);
    add_row("encoder_deform", t, enc_cost, mc_deform, seconds_since(t0));

    MacCounter mc_dec;
    t0 = Clock::now();
    ms_deform_attn(queries, query_refs, ReferenceKind::Normalized, feats, deform, attn, ExecutionOrder::Auto,
                   nullptr, &mc_dec);
    add_row("decoder_deform", cfg.queries, dec_cost, mc_dec, seconds_since(t0));

    hw.push_back(t);
    dense_macs.push_back(static_cast<double>(mc_dense.macs));
    deform_macs.push_back(static_cast<double>(mc_deform.macs));
    decoder_macs.push_back(static_cast<double>(mc_dec.macs));
  }
  report.exponent_dense = fit_loglog_slope(hw, dense_macs);
  report.exponent_deform = fit_loglog_slope(hw, deform_macs);
  const auto [lo, hi] = std::minmax_element(decoder_macs.begin(), decoder_macs.end());
  const double mean = std::accumulate(decoder_macs.begin(), decoder_macs.end(), 0.0) / decoder_macs.size();
  report.decoder_spread = (*hi - *lo) / mean;
  return report;
}

std::string bench_to_json(const BenchReport& report) {
  nlohmann::ordered_json j;
  j["format"] = "ddetr-bench";
  j["version"] = 1;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    nlohmann::ordered_json row;
    row["config"] = r.config;
    row["image_size"] = r.image_size;
    row["N_q"] = r.n_query;
    row["HW"] = r.hw;
    row["flops_dense"] = r.flops_dense;
    row["flops_deform"] = r.flops_deform;
    row["measured_macs"] = r.measured_macs;
    row["wall_seconds"] = r.wall_seconds;
    j["rows"].push_back(row);
  }
  j["exponent_dense"] = report.exponent_dense;
  j["exponent_deform"] = report.exponent_deform;
  j["decoder_spread"] = report.decoder_spread;
  return j.dump(2);
}

}  // namespace ddetr
