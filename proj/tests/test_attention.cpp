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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "ddetr/attention.hpp"
#include "ddetr/pyramid.hpp"
#include "checks.hpp"

using namespace ddetr;

using checks::max_abs_diff;
using checks::random_dense;
using checks::random_deform;
using checks::random_features;
using checks::uniform_refs;

// ---------------------------------------------------------------------------
// Dense attention

TEST_CASE("multi_head_attn matches the loop oracle") {
  Rng rng(11);
  AttnConfig cfg{.heads = 2, .channels = 8};
  for (int t = 0; t < 10; ++t) {
    const DenseAttnParams p = random_dense(cfg, rng);
    const Mat q = normal_matrix(3, 8, 1.0, rng);
    const Mat k = normal_matrix(5, 8, 1.0, rng);
    const Mat v = normal_matrix(5, 8, 1.0, rng);
    CHECK(max_abs_diff(multi_head_attn(q, k, v, p, cfg), oracle::multi_head_attn(q, k, v, p, cfg)) < 1e-10);
  }
}

TEST_CASE("multi_head_attn with a single key copies its projected value") {
  Rng rng(12);
  AttnConfig cfg{.heads = 4, .channels = 8};
  const DenseAttnParams p = random_dense(cfg, rng);
  const Mat q = normal_matrix(3, 8, 1.0, rng);
  const Mat x = normal_matrix(1, 8, 1.0, rng);
  const Mat expected = p.output_proj.forward(p.value_proj.forward(x));
  const Mat out = multi_head_attn(q, x, p, cfg);
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(max_abs_diff(out.row(i), expected) < 1e-12);
}

TEST_CASE("multi_head_attn weights: uniform with zero query projection, normalized otherwise") {
  Rng rng(13);
  AttnConfig cfg{.heads = 2, .channels = 8};
  DenseAttnParams p = random_dense(cfg, rng);
  const Mat q = normal_matrix(4, 8, 1.0, rng);
  const Mat k = normal_matrix(6, 8, 1.0, rng);
  for (const Mat& w : dense_attention_weights(q, k, p, cfg)) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-6);
  }
  p.query_proj.weight.value.setZero();
  p.query_proj.bias.value.setZero();
  for (const Mat& w : dense_attention_weights(q, k, p, cfg)) CHECK((w.array() - 1.0 / 6.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("multi_head_attn is invariant to key order") {
  Rng rng(14);
  AttnConfig cfg{.heads = 2, .channels = 8};
  const DenseAttnParams p = random_dense(cfg, rng);
  const Mat q = normal_matrix(3, 8, 1.0, rng);
  const Mat k = normal_matrix(7, 8, 1.0, rng);
  std::vector<int> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Mat kp(7, 8);
  for (int i = 0; i < 7; ++i) kp.row(i) = k.row(perm[i]);
  CHECK(max_abs_diff(multi_head_attn(q, k, p, cfg), multi_head_attn(q, kp, p, cfg)) < 1e-10);
}

TEST_CASE("dense attention MAC count against the cost model") {
  Rng rng(15);
  AttnConfig cfg{.heads = 2, .channels = 16};
  const DenseAttnParams p = random_dense(cfg, rng);
  const int n = 10;
  const Mat x = normal_matrix(n, 16, 1.0, rng);
  MacCounter mc;
  multi_head_attn(x, x, x, p, cfg, nullptr, &mc);
  // Self-attention over N queries: 2 N C^2 + N^2 C dominant terms.
  const double dominant = 2.0 * n * 16 * 16 + 1.0 * n * n * 16;
  CHECK(mc.macs >= dominant);
  CHECK(mc.macs <= 2.0 * dominant);
}

// ---------------------------------------------------------------------------
// Sampling parameters and initialization

TEST_CASE("predict_sampling_params normalizes weights jointly over levels and points") {
  Rng rng(21);
  AttnConfig cfg{.heads = 3, .channels = 12, .points = 3, .levels = 2};
  const DeformAttnParams p = random_deform(cfg, rng);
  const SamplingPlan plan = predict_sampling_params(normal_matrix(5, 12, 2.0, rng), p, cfg);
  for (int q = 0; q < 5; ++q) {
    for (int m = 0; m < 3; ++m) {
      double s = 0.0;
      for (int l = 0; l < 2; ++l) {
        for (int k = 0; k < 3; ++k) {
          const double a = plan.weight(q, m, l, k);
          CHECK(a >= 0.0);
          CHECK(a <= 1.0);
          s += a;
        }
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("initialization pattern by enumeration") {
  Rng rng(22);
  for (int k = 1; k <= 4; ++k) {
    for (int l = 1; l <= 4; ++l) {
      for (bool refine : {false, true}) {
        AttnConfig cfg{.heads = 8, .channels = 16, .points = k, .levels = l};
        const DeformAttnParams p = init_deform_params(cfg, refine, rng);
        CHECK(p.sampling_offsets.weight.value.isZero(0.0));
        CHECK(p.attention_weights.weight.value.isZero(0.0));
        CHECK(p.attention_weights.bias.value.isZero(0.0));
        CHECK(checks::init_pattern_mismatches(k, l, refine, rng) == 0);
      }
    }
  }
}

TEST_CASE("initialization spot values") {
  Rng rng(23);
  const Mat z = Mat::Zero(1, 16);
  {
    AttnConfig cfg{.heads = 8, .channels = 16, .points = 4, .levels = 4};
    const SamplingPlan plan = predict_sampling_params(z, init_deform_params(cfg, false, rng), cfg);
    CHECK(plan.weight(0, 5, 2, 1) == 1.0 / 16.0);
    CHECK(plan.offset(0, 7, 0, 2).x == 3.0);
    CHECK(plan.offset(0, 7, 0, 2).y == 3.0);
    const SamplingPlan refined = predict_sampling_params(z, init_deform_params(cfg, true, rng), cfg);
    CHECK(refined.offset(0, 7, 3, 2).x == 3.0 / 8.0);
    CHECK(refined.offset(0, 7, 3, 2).y == 3.0 / 8.0);
  }
  {
    AttnConfig cfg{.heads = 8, .channels = 16, .points = 2, .levels = 1};
    const SamplingPlan plan = predict_sampling_params(z, init_deform_params(cfg, false, rng), cfg);
    CHECK(plan.offset(0, 0, 0, 0).x == -1.0);
    CHECK(plan.offset(0, 0, 0, 0).y == -1.0);
    CHECK(plan.offset(0, 0, 0, 1).x == -2.0);
    CHECK(plan.offset(0, 0, 0, 1).y == -2.0);
    CHECK(plan.offset(0, 4, 0, 0).x == 0.0);
    CHECK(plan.offset(0, 4, 0, 0).y == 1.0);
    CHECK(plan.offset(0, 4, 0, 1).y == 2.0);
  }
  CHECK(init_direction(9).x == init_direction(1).x);
  CHECK(init_direction(9).y == init_direction(1).y);
}

// ---------------------------------------------------------------------------
// Deformable attention forward

TEST_CASE("ms_deform_attn matches the loop oracle") {
  Rng rng(31);
  AttnConfig cfg{.heads = 2, .channels = 8, .points = 3, .levels = 2};
  for (int t = 0; t < 20; ++t) {
    const DeformAttnParams p = random_deform(cfg, rng);
    const FlatFeatures f = random_features({{5, 6}, {3, 3}}, 8, rng);
    const Mat q = normal_matrix(4, 8, 1.0, rng);
    const Mat refs = uniform_refs(4, 2, 0.0, 1.0, rng);
    const Mat expected = oracle::ms_deform_attn(q, refs, f, p, cfg);
    CHECK(max_abs_diff(ms_deform_attn(q, refs, ReferenceKind::Normalized, f, p, cfg), expected) < 1e-10);
  }
}

TEST_CASE("execution orders agree") {
  Rng rng(32);
  for (int t = 0; t < 20; ++t) CHECK(checks::execution_order_error(rng) < 1e-10);
}

TEST_CASE("single level ms_deform_attn reduces to deform_attn") {
  Rng rng(33);
  AttnConfig cfg{.heads = 2, .channels = 8, .points = 3, .levels = 1};
  const DeformAttnParams p = random_deform(cfg, rng);
  FeatureMap map(8, 5, 7);
  map.data = normal_matrix(8, 35, 1.0, rng);
  const Mat q = normal_matrix(4, 8, 1.0, rng);
  const Mat refs = uniform_refs(4, 2, 0.0, 1.0, rng);
  Mat pixel(4, 2);
  for (int i = 0; i < 4; ++i) {
    const Point2 px = rescale_reference({refs(i, 0), refs(i, 1)}, {5, 7});
    pixel.row(i) << px.x, px.y;
  }
  const Mat a = ms_deform_attn(q, refs, std::span(&map, 1), p, cfg);
  const Mat b = deform_attn(q, pixel, map, p, cfg);
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("initialized attention on constant maps returns the projected constant") {
  Rng rng(34);
  AttnConfig cfg{.heads = 8, .channels = 16, .points = 4, .levels = 2};
  const DeformAttnParams p = init_deform_params(cfg, false, rng);
  Mat v = normal_matrix(1, 16, 1.0, rng);
  FlatFeatures f;
  f.shapes = {{20, 20}, {12, 12}};
  f.tokens = v.replicate(f.total_tokens(), 1);
  const Mat q = normal_matrix(3, 16, 1.0, rng);
  const Mat refs = uniform_refs(3, 2, 0.4, 0.6, rng);  // offsets up to 4 pixels stay inside
  const Mat expected = p.output_proj.forward(p.value_proj.forward(v));
  const Mat out = ms_deform_attn(q, refs, ReferenceKind::Normalized, f, p, cfg);
  for (int i = 0; i < 3; ++i) CHECK(max_abs_diff(out.row(i), expected) < 1e-12);
}

TEST_CASE("samples outside every map leave only the output bias") {
  Rng rng(35);
  AttnConfig cfg{.heads = 2, .channels = 8, .points = 2, .levels = 1};
  DeformAttnParams p = random_deform(cfg, rng);
  p.sampling_offsets.weight.value.setZero();
  p.sampling_offsets.bias.value.setConstant(-50.0);
  const FlatFeatures f = random_features({{6, 6}}, 8, rng);
  const Mat q = normal_matrix(3, 8, 1.0, rng);
  const Mat refs = uniform_refs(3, 2, 0.0, 1.0, rng);
  for (ExecutionOrder order : {ExecutionOrder::ProjectThenSample, ExecutionOrder::SampleThenProject}) {
    const Mat out = ms_deform_attn(q, refs, ReferenceKind::Normalized, f, p, cfg, order);
    for (int i = 0; i < 3; ++i) CHECK(max_abs_diff(out.row(i), p.output_proj.bias.value) < 1e-14);
  }
}

TEST_CASE("deformable attention degenerates to deformable convolution") {
  Rng rng(36);
  for (int t = 0; t < 20; ++t) CHECK(checks::deform_conv_error(rng) < 1e-10);
}

TEST_CASE("sampling every pixel with dense weights reproduces dense attention") {
  Rng rng(37);
  for (int t = 0; t < 20; ++t) CHECK(checks::dense_equivalence_error(rng) < 1e-10);
}

// ---------------------------------------------------------------------------
// Deformable attention backward

TEST_CASE("ms_deform_attn_backward: zero upstream gives zero gradients") {
  Rng rng(41);
  AttnConfig cfg{.heads = 2, .channels = 8, .points = 2, .levels = 2};
  DeformAttnParams p = random_deform(cfg, rng);
  const FlatFeatures f = random_features({{4, 4}, {2, 2}}, 8, rng);
  const Mat q = normal_matrix(3, 8, 1.0, rng);
  const Mat refs = uniform_refs(3, 2, 0.0, 1.0, rng);
  MsDeformCache cache;
  ms_deform_attn(q, refs, ReferenceKind::Normalized, f, p, cfg, ExecutionOrder::ProjectThenSample, &cache);
  ParamList params;
  p.collect(params, "attn");
  for (auto& r : params) r.param->zero_grad();
  const MsDeformGrads g = ms_deform_attn_backward(p, cfg, cache, Mat::Zero(3, 8));
  CHECK(g.d_query.isZero(0.0));
  CHECK(g.d_input.isZero(0.0));
  CHECK(g.d_refs.isZero(0.0));
  for (auto& r : params) CHECK(r.param->grad.isZero(0.0));
}

TEST_CASE("ms_deform_attn_backward: flat maps give no location gradient") {
  Rng rng(42);
  AttnConfig cfg{.heads = 2, .channels = 8, .points = 2, .levels = 1};
  DeformAttnParams p = random_deform(cfg, rng);
  p.sampling_offsets.weight.value.setZero();
  p.sampling_offsets.bias.value = uniform_refs(1, p.sampling_offsets.bias.value.cols(), -1.5, 1.5, rng);
  FlatFeatures f;
  f.shapes = {{10, 10}};
  f.tokens = normal_matrix(1, 8, 1.0, rng).replicate(100, 1);
  const Mat q = normal_matrix(3, 8, 1.0, rng);
  const Mat refs = uniform_refs(3, 2, 0.3, 0.7, rng);
  MsDeformCache cache;
  ms_deform_attn(q, refs, ReferenceKind::Normalized, f, p, cfg, ExecutionOrder::ProjectThenSample, &cache);
  ParamList params;
  p.collect(params, "attn");
  for (auto& r : params) r.param->zero_grad();
  const MsDeformGrads g = ms_deform_attn_backward(p, cfg, cache, normal_matrix(3, 8, 1.0, rng));
  CHECK(g.d_refs.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(p.sampling_offsets.bias.grad.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("ms_deform_attn_backward matches finite differences") {
  Rng rng(43);
  AttnConfig cfg{.heads = 2, .channels = 8, .points = 3, .levels = 2};
  for (int t = 0; t < 5; ++t) {
    DeformAttnParams p = random_deform(cfg, rng);
    FlatFeatures f = random_features({{5, 4}, {3, 2}}, 8, rng);
    Mat q = normal_matrix(4, 8, 1.0, rng);
    Mat refs = uniform_refs(4, 2, 0.1, 0.9, rng);
    const Mat up = normal_matrix(4, 8, 1.0, rng);
    auto loss = [&] { return ms_deform_attn(q, refs, ReferenceKind::Normalized, f, p, cfg).cwiseProduct(up).sum(); };
    MsDeformCache cache;
    ms_deform_attn(q, refs, ReferenceKind::Normalized, f, p, cfg, ExecutionOrder::ProjectThenSample, &cache);
    ParamList params;
    p.collect(params, "attn");
    for (auto& r : params) r.param->zero_grad();
    const MsDeformGrads g = ms_deform_attn_backward(p, cfg, cache, up);
    auto check = [&](Mat& x, const Mat& analytic) {
      const GradReport r = finite_diff_check(loss, std::span(x.data(), x.size()),
                                             std::span<const double>(analytic.data(), analytic.size()), 1e-5, 1e-4);
      CHECK(r.max_rel_err < 1e-4);
    };
    check(q, g.d_query);
    check(f.tokens, g.d_input);
    check(refs, g.d_refs);
    for (auto& r : params) {
      const Mat analytic = r.param->grad;
      check(r.param->value, analytic);
    }
  }
}

// ---------------------------------------------------------------------------
// Cost model

TEST_CASE("flop_estimate formulas") {
  AttnConfig cfg{.heads = 8, .channels = 64, .points = 4, .levels = 1};
  const std::vector<LevelShape> lv{{10, 12}};
  const CostModel cm = flop_estimate(cfg, 30, lv);
  CHECK(cm.flops_dense == 30ull * 64 * 64 + 120ull * 64 * 64 + 30ull * 120 * 64);
  CHECK(cm.flops_deform == 30ull * 64 * 64 + std::min(120ull * 64 * 64, 30ull * 4 * 64 * 64) + 5ull * 30 * 4 * 64 +
                               3ull * 30 * 64 * 8 * 4);
  CHECK_THROWS(flop_estimate(cfg, 0, lv));
}

TEST_CASE("flop_estimate growth with the feature map size") {
  AttnConfig cfg{.heads = 8, .channels = 64, .points = 4, .levels = 1};
  const std::vector<LevelShape> small{{16, 16}}, large{{32, 32}};
  const CostModel a = flop_estimate(cfg, 256, small);
  const CostModel b = flop_estimate(cfg, 1024, large);
  CHECK(b.dense.pairwise == 16 * a.dense.pairwise);
  CHECK(b.deform.value_proj == 4 * a.deform.value_proj);
  // Decoder: N_q K C^2 < HW C^2, so the estimate does not see HW.
  const CostModel c = flop_estimate(cfg, 30, small);
  const CostModel d = flop_estimate(cfg, 30, large);
  CHECK(c.flops_deform == d.flops_deform);
}
