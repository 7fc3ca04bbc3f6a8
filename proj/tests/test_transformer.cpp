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

#include "ddetr/model.hpp"

using namespace ddetr;

namespace {

ModelConfig small_config(DetectorMode mode, AttentionKind attention = AttentionKind::Deformable) {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.levels = 3;
  cfg.queries = 5;
  cfg.ffn_hidden = 24;
  cfg.stem_width = 4;
  cfg.mode = mode;
  cfg.attention = attention;
  return cfg;
}

FeatureMap random_image(int size, double scale, Rng& rng) {
  FeatureMap img(3, size, size);
  img.data = uniform_matrix(3, size * size, scale, rng);
  return img;
}

void perturb(Model& m, double scale, Rng& rng) {
  for (auto& p : m.parameters()) {
    p.param->value += normal_matrix(p.param->value.rows(), p.param->value.cols(), scale, rng);
  }
}

bool same_output(const ModelOutput& a, const ModelOutput& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].logits != b.layers[l].logits) return false;
    for (std::size_t q = 0; q < a.layers[l].boxes.size(); ++q) {
      const BoxN& x = a.layers[l].boxes[q];
      const BoxN& y = b.layers[l].boxes[q];
      if (x.cx != y.cx || x.cy != y.cy || x.w != y.w || x.h != y.h) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("encoder sees every pyramid token") {
  ModelConfig cfg = small_config(DetectorMode::Plain);
  cfg.image_size = 64;
  cfg.levels = 4;
  const Model m = Model::init(cfg, 1);
  Rng rng(1);
  ModelCache cache;
  run_model(m, random_image(64, 1.0, rng), &cache);
  CHECK(cache.memory.rows() == 85);
  CHECK(cache.pos.rows() == 85);
  CHECK(cache.memory.cols() == 16);
}

TEST_CASE("two encoder layers equal one layer applied twice") {
  for (AttentionKind kind : {AttentionKind::Deformable, AttentionKind::Dense}) {
    ModelConfig cfg = small_config(DetectorMode::Plain, kind);
    cfg.encoder_layers = 2;
    Model m = Model::init(cfg, 2);
    Rng rng(2);
    perturb(m, 0.05, rng);
    m.encoder[1] = m.encoder[0];
    const FeatureMap img = random_image(32, 1.0, rng);
    ModelCache cache;
    run_model(m, img, &cache);

    const FeaturePyramid pyr = build_pyramid(img, m.stem);
    FlatFeatures x = pyr.flatten();
    const Mat refs = encoder_reference_points(x.shapes);
    for (int i = 0; i < 2; ++i) x.tokens = m.encoder[0].forward(x, cache.pos, refs, cfg.attn());
    CHECK((x.tokens - cache.memory).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("reference points start at the image center with a zero projection") {
  Rng rng(3);
  Linear proj(16, 2);
  const Mat refs = predict_reference_points(normal_matrix(7, 16, 1.0, rng), proj);
  CHECK((refs.array() - 0.5).abs().maxCoeff() == 0.0);
}

TEST_CASE("a single query decodes") {
  ModelConfig cfg = small_config(DetectorMode::Plain);
  cfg.queries = 1;
  const Model m = Model::init(cfg, 4);
  Rng rng(4);
  const ModelOutput out = run_model(m, random_image(32, 1.0, rng));
  REQUIRE(out.layers.size() == 2);
  CHECK(out.layers.back().logits.rows() == 1);
  CHECK(out.layers.back().logits.allFinite());
}

TEST_CASE("decoder layer is equivariant to query order") {
  Rng rng(5);
  for (AttentionKind kind : {AttentionKind::Deformable, AttentionKind::Dense}) {
    const ModelConfig cfg = small_config(DetectorMode::Plain, kind);
    const AttnConfig attn = cfg.attn();
    DecoderLayer layer = DecoderLayer::init(attn, 24, kind, false, rng);
    ParamList params;
    layer.collect(params, "dec", 1.0);
    for (auto& p : params) {
      p.param->value += normal_matrix(p.param->value.rows(), p.param->value.cols(), 0.1, rng);
    }
    FlatFeatures memory;
    memory.shapes = {{4, 4}, {2, 2}, {1, 1}};
    memory.tokens = normal_matrix(21, 16, 1.0, rng);
    const Mat memory_pos = normal_matrix(21, 16, 1.0, rng);
    const Mat tgt = normal_matrix(6, 16, 1.0, rng);
    const Mat qpos = normal_matrix(6, 16, 1.0, rng);
    const Mat refs = (uniform_matrix(6, 2, 1.0, rng).array() + 1.0) / 2.0;
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat tp(6, 16), qp(6, 16), rp(6, 2);
    for (int i = 0; i < 6; ++i) {
      tp.row(i) = tgt.row(perm[i]);
      qp.row(i) = qpos.row(perm[i]);
      rp.row(i) = refs.row(perm[i]);
    }
    const Mat a = layer.forward(tgt, qpos, refs, ReferenceKind::Normalized, memory, memory_pos, attn);
    const Mat b = layer.forward(tp, qp, rp, ReferenceKind::Normalized, memory, memory_pos, attn);
    for (int i = 0; i < 6; ++i) CHECK((b.row(i) - a.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("initialization and forward are deterministic") {
  for (DetectorMode mode : {DetectorMode::Plain, DetectorMode::Refine, DetectorMode::TwoStage}) {
    const ModelConfig cfg = small_config(mode);
    Model a = Model::init(cfg, 9);
    Model b = Model::init(cfg, 9);
    Model c = Model::init(cfg, 10);
    const ParamList pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      all_equal = all_equal && pa[i].param->value == pb[i].param->value;
      any_diff = any_diff || pa[i].param->value != pc[i].param->value;
    }
    CHECK(all_equal);
    CHECK(any_diff);
    Rng rng(6);
    const FeatureMap img = random_image(32, 1.0, rng);
    CHECK(same_output(run_model(a, img), run_model(a, img)));
    CHECK(same_output(run_model(a, img), run_model(b, img)));
  }
}

TEST_CASE("plain mode decodes around the predicted reference") {
  Model m = Model::init(small_config(DetectorMode::Plain), 11);
  Rng rng(7);
  perturb(m, 0.05, rng);
  ModelCache cache;
  const ModelOutput out = run_model(m, random_image(32, 1.0, rng), &cache);
  const Mat refs = predict_reference_points(m.query_pos.value, m.reference_proj);
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    CHECK((out.references[l] - refs).cwiseAbs().maxCoeff() == 0.0);
    for (int q = 0; q < 5; ++q) {
      const Mat& raw = cache.raw_boxes[l];
      const BoxN b = decode_box({refs(q, 0), refs(q, 1)}, {raw(q, 0), raw(q, 1), raw(q, 2), raw(q, 3)});
      const BoxN& o = out.layers[l].boxes[static_cast<std::size_t>(q)];
      CHECK(std::abs(o.cx - b.cx) + std::abs(o.cy - b.cy) + std::abs(o.w - b.w) + std::abs(o.h - b.h) < 1e-15);
    }
  }
}

TEST_CASE("refine mode chains boxes through the decoder") {
  ModelConfig cfg = small_config(DetectorMode::Refine);
  cfg.decoder_layers = 3;
  Model m = Model::init(cfg, 12);
  Rng rng(8);
  perturb(m, 0.05, rng);
  ModelCache cache;
  const ModelOutput out = run_model(m, random_image(32, 1.0, rng), &cache);
  const Mat refs = predict_reference_points(m.query_pos.value, m.reference_proj);
  REQUIRE(out.layers.size() == 3);
  CHECK(out.detached[0].empty());
  for (std::size_t l = 0; l < 3; ++l) {
    for (int q = 0; q < 5; ++q) {
      const auto qi = static_cast<std::size_t>(q);
      const BoxN prev = l == 0 ? initial_box({refs(q, 0), refs(q, 1)}, cfg.initial_box_size) : out.layers[l - 1].boxes[qi];
      const Mat& raw = cache.raw_boxes[l];
      const BoxN b = refine_box(prev, {raw(q, 0), raw(q, 1), raw(q, 2), raw(q, 3)});
      const BoxN& o = out.layers[l].boxes[qi];
      CHECK(std::abs(o.cx - b.cx) + std::abs(o.cy - b.cy) + std::abs(o.w - b.w) + std::abs(o.h - b.h) < 1e-15);
      CHECK(out.references[l](q, 0) == prev.cx);
      CHECK(out.references[l](q, 3) == prev.h);
      if (l > 0) CHECK(out.detached[l][qi].cx == prev.cx);
    }
  }
}

TEST_CASE("full model gradients match finite differences with blocked boxes frozen") {
  struct Case {
    DetectorMode mode;
    AttentionKind attention;
  };
  const Case cases[] = {{DetectorMode::Plain, AttentionKind::Deformable},
                        {DetectorMode::Refine, AttentionKind::Deformable},
                        {DetectorMode::TwoStage, AttentionKind::Deformable},
                        {DetectorMode::Plain, AttentionKind::Dense}};
  const std::vector<GroundTruthBox> gt = {
      {0, {0.3, 0.3, 0.2, 0.2}}, {1, {0.7, 0.6, 0.3, 0.1}}, {2, {0.5, 0.5, 0.1, 0.4}}};
  for (const Case& tc : cases) {
    INFO(to_string(tc.mode) << " " << to_string(tc.attention));
    Model m = Model::init(small_config(tc.mode, tc.attention), 13);
    Rng rng(9);
    perturb(m, 0.05, rng);
    const FeatureMap img = random_image(32, 1.0, rng);
    m.zero_grad();
    model_loss(m, img, gt, true);
    const DetachedBoxes frozen = run_model(m, img).detached;
    double worst = 0.0;
    for (auto& p : m.parameters()) {
      for (Eigen::Index i = 0; i < std::min<Eigen::Index>(p.param->size(), 8); ++i) {
        const Eigen::Index idx = (i * 7919) % p.param->size();
        double& v = p.param->value.data()[idx];
        const double orig = v;
        const double h = 1e-5;
        v = orig + h;
        const double fp = model_loss(m, img, gt, false, {}, {}, nullptr, &frozen).total;
        v = orig - h;
        const double fm = model_loss(m, img, gt, false, {}, {}, nullptr, &frozen).total;
        v = orig;
        const double numeric = (fp - fm) / (2 * h);
        const double analytic = p.param->grad.data()[idx];
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4});
        if (rel > 1e-4) MESSAGE(p.name << "[" << idx << "] analytic " << analytic << " numeric " << numeric);
        worst = std::max(worst, rel);
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("outputs stay finite for large inputs") {
  for (DetectorMode mode : {DetectorMode::Plain, DetectorMode::Refine, DetectorMode::TwoStage}) {
    const Model m = Model::init(small_config(mode), 14);
    Rng rng(10);
    const ModelOutput out = run_model(m, random_image(32, 100.0, rng));
    for (const auto& l : out.layers) {
      CHECK(l.logits.allFinite());
      for (const auto& b : l.boxes) CHECK(std::isfinite(b.cx + b.cy + b.w + b.h));
    }
  }
}
