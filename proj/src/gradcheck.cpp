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

#include "ddetr/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>

#include "ddetr/attention.hpp"
#include "ddetr/boxes.hpp"
#include "ddetr/loss.hpp"
#include "ddetr/model.hpp"

namespace ddetr {

namespace {

class Collector {
 public:
  explicit Collector(const GradCheckOptions& opts) : opts_(opts) {}

  void add(const std::string& name, const GradReport& r) {
    auto [it, fresh] = index_.try_emplace(name, entries_.size());
    if (fresh) entries_.push_back({name});
    GradCheckEntry& e = entries_[it->second];
    e.n_checked += r.n_checked;
    e.max_abs_err = std::max(e.max_abs_err, r.max_abs_err);
    e.max_rel_err = std::max(e.max_rel_err, r.max_rel_err);
    e.passed = e.passed && r.max_rel_err < opts_.tolerance;
  }

  void mark_instance(const std::string& name) { entries_[index_.at(name)].instances += 1; }

  void fail(const std::string& name) { entries_[index_.at(name)].passed = false; }

  /// Checks `values` in place against `analytic`.
  void check(const std::string& name, const std::function<double()>& f, Mat& values, const Mat& analytic,
             bool new_instance = true) {
    add(name, finite_diff_check(f, std::span(values.data(), static_cast<std::size_t>(values.size())),
                                std::span(analytic.data(), static_cast<std::size_t>(analytic.size())), opts_.step,
                                opts_.abs_floor));
    if (new_instance) mark_instance(name);
  }

  std::vector<GradCheckEntry> take() { return std::move(entries_); }

 private:
  const GradCheckOptions& opts_;
  std::vector<GradCheckEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

double frobenius_dot(const Mat& a, const Mat& b) { return a.cwiseProduct(b).sum(); }

Mat uniform_in(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

void check_deform(Collector& col, ReferenceKind kind, Rng& rng) {
  std::uniform_int_distribution<int> side(2, 6);
  AttnConfig cfg;
  cfg.heads = 2;
  cfg.channels = 8;
  cfg.points = 2;
  cfg.levels = 2;
  DeformAttnParams params = init_deform_params(cfg, false, rng);
  // Move away from the structured initialization so every path carries gradient.
  params.sampling_offsets.weight.value = normal_matrix(params.sampling_offsets.weight.value.rows(), cfg.channels, 0.3, rng);
  params.sampling_offsets.bias.value += normal_matrix(1, params.sampling_offsets.bias.value.cols(), 0.5, rng);
  params.attention_weights.weight.value = normal_matrix(params.attention_weights.weight.value.rows(), cfg.channels, 0.5, rng);
  params.attention_weights.bias.value = normal_matrix(1, params.attention_weights.bias.value.cols(), 0.5, rng);
  params.value_proj.bias.value = normal_matrix(1, params.value_proj.bias.value.cols(), 0.5, rng);
  params.output_proj.bias.value = normal_matrix(1, params.output_proj.bias.value.cols(), 0.5, rng);

  FlatFeatures input;
  for (int l = 0; l < cfg.levels; ++l) input.shapes.push_back({side(rng), side(rng)});
  input.tokens = normal_matrix(input.total_tokens(), cfg.channels, 1.0, rng);
  const int nq = 4;
  Mat query = normal_matrix(nq, cfg.channels, 1.0, rng);
  Mat refs = kind == ReferenceKind::Box ? uniform_in(nq, 4, 0.1, 0.9, rng) : uniform_in(nq, 2, 0.05, 0.95, rng);
  if (kind == ReferenceKind::Box) refs.rightCols(2) = uniform_in(nq, 2, 0.1, 0.5, rng);
  const Mat weight = normal_matrix(nq, cfg.channels, 1.0, rng);

  auto loss = [&] {
    return frobenius_dot(weight, ms_deform_attn(query, refs, kind, input, params, cfg));
  };
  MsDeformCache cache;
  ms_deform_attn(query, refs, kind, input, params, cfg, ExecutionOrder::ProjectThenSample, &cache);
  ParamList plist;
  params.collect(plist, "");
  for (auto& p : plist) p.param->zero_grad();
  const MsDeformGrads g = ms_deform_attn_backward(params, cfg, cache, weight);

  const std::string prefix = kind == ReferenceKind::Box ? "ms_deform_attn[box]." : "ms_deform_attn[normalized].";
  col.check(prefix + "query", loss, query, g.d_query);
  col.check(prefix + "input", loss, input.tokens, g.d_input);
  col.check(prefix + "refs", loss, refs, g.d_refs);
  for (auto& p : plist) {
    const Mat analytic = p.param->grad;
    std::string name = p.name;
    if (!name.empty() && name.front() == '.') name.erase(0, 1);
    col.check(prefix + name, loss, p.param->value, analytic);
  }
}

void check_boxes(Collector& col, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const Mat weight = normal_matrix(1, 4, 1.0, rng);
  auto as_mat = [](const BoxN& b) {
    Mat m(1, 4);
    m << b.cx, b.cy, b.w, b.h;
    return m;
  };

  Mat raw(1, 4), ref(1, 2);
  for (Eigen::Index i = 0; i < 4; ++i) raw(0, i) = n01(rng);
  ref << u(rng), u(rng);
  auto decoded = [&] {
    return frobenius_dot(weight, as_mat(decode_box({ref(0, 0), ref(0, 1)}, {raw(0, 0), raw(0, 1), raw(0, 2), raw(0, 3)})));
  };
  const DecodeJacobian j = decode_box_jacobian({ref(0, 0), ref(0, 1)}, {raw(0, 0), raw(0, 1), raw(0, 2), raw(0, 3)});
  Mat d_raw(1, 4), d_ref(1, 2);
  d_raw << weight(0, 0) * j.d_raw.x, weight(0, 1) * j.d_raw.y, weight(0, 2) * j.d_raw.w, weight(0, 3) * j.d_raw.h;
  d_ref << weight(0, 0) * j.d_reference.x, weight(0, 1) * j.d_reference.y;
  col.check("decode_box.raw", decoded, raw, d_raw);
  col.check("decode_box.reference", decoded, ref, d_ref);

  const BoxN prev{u(rng), u(rng), 0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng)};
  Mat delta(1, 4);
  for (Eigen::Index i = 0; i < 4; ++i) delta(0, i) = n01(rng);
  auto refined = [&] {
    return frobenius_dot(weight, as_mat(refine_box(prev, {delta(0, 0), delta(0, 1), delta(0, 2), delta(0, 3)})));
  };
  const RawBox rj = refine_box_jacobian(prev, {delta(0, 0), delta(0, 1), delta(0, 2), delta(0, 3)});
  Mat d_delta(1, 4);
  d_delta << weight(0, 0) * rj.x, weight(0, 1) * rj.y, weight(0, 2) * rj.w, weight(0, 3) * rj.h;
  col.check("refine_box.deltas", refined, delta, d_delta);
}

std::vector<GroundTruthBox> random_targets(int max_count, int num_classes, Rng& rng) {
  std::uniform_int_distribution<int> count(0, max_count);
  std::uniform_int_distribution<int> cls(0, num_classes - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<GroundTruthBox> gt(static_cast<std::size_t>(count(rng)));
  for (auto& g : gt) {
    g.cls = cls(rng);
    g.box = {0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.05 + 0.3 * u(rng), 0.05 + 0.3 * u(rng)};
  }
  return gt;
}

// Refinement mode with separate heads: layer 0's box only feeds layer 1 through the
// detached input box, so a loss on the last layer must give box_heads[0] zero gradient.
void check_blocked_path(Collector& col, Rng& rng) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.levels = 2;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 2;
  cfg.queries = 5;
  cfg.ffn_hidden = 32;
  cfg.stem_width = 4;
  cfg.mode = DetectorMode::Refine;
  Model model = Model::init(cfg, rng());
  // Give the first box head non-trivial output so its boxes actually move.
  for (auto& layer : model.box_heads[0].layers) {
    layer.weight.value = normal_matrix(layer.weight.value.rows(), layer.weight.value.cols(), 0.3, rng);
    layer.bias.value = normal_matrix(1, layer.bias.value.cols(), 0.3, rng);
  }
  FeatureMap image(3, cfg.image_size, cfg.image_size);
  image.data = uniform_in(3, cfg.image_size * cfg.image_size, 0.0, 1.0, rng);
  const auto gt = random_targets(3, cfg.num_classes, rng);

  ModelCache cache;
  const ModelOutput out = run_model(model, image, &cache);
  const DetachedBoxes frozen = out.detached;
  const SetLossResult last = set_loss(std::span(&out.layers.back(), 1), gt);
  OutputGrads grads;
  for (std::size_t d = 0; d < out.layers.size(); ++d) {
    grads.d_logits.push_back(Mat::Zero(cfg.queries, cfg.num_classes));
    grads.d_boxes.push_back(Mat::Zero(cfg.queries, 4));
  }
  grads.d_logits.back() = last.d_logits[0];
  grads.d_boxes.back() = last.d_boxes[0];
  model.zero_grad();
  backward_model(model, cache, grads);

  auto loss = [&] {
    const ModelOutput o = run_model(model, image, nullptr, nullptr, &frozen);
    return set_loss(std::span(&o.layers.back(), 1), gt).terms.total;
  };
  const std::string name = "refine.blocked_path.box_head0";
  bool first = true;
  for (auto& layer : model.box_heads[0].layers) {
    for (Parameter* p : {&layer.weight, &layer.bias}) {
      const Mat analytic = p->grad;
      col.check(name, loss, p->value, analytic, first);
      first = false;
      if (!analytic.isZero(0.0)) col.fail(name);
    }
  }
}

void check_set_loss(Collector& col, Rng& rng) {
  const int n = 6, c = 8, classes = 3;
  Linear cls = Linear::xavier(c, classes, rng);
  cls.bias.value = normal_matrix(1, classes, 1.0, rng);
  Mlp box(c, c, 4, 3, rng);
  Mat hidden = normal_matrix(n, c, 1.0, rng);
  const Mat refs = uniform_in(n, 2, 0.1, 0.9, rng);
  const auto gt = random_targets(4, classes, rng);

  auto predict = [&](Mlp::Cache* cache) {
    LayerPrediction p;
    p.logits = cls.forward(hidden);
    const Mat raw = box.forward(hidden, cache);
    for (int q = 0; q < n; ++q) {
      p.boxes.push_back(decode_box({refs(q, 0), refs(q, 1)}, {raw(q, 0), raw(q, 1), raw(q, 2), raw(q, 3)}));
    }
    return std::pair(p, raw);
  };
  auto loss = [&] {
    const auto p = predict(nullptr).first;
    return set_loss(std::span(&p, 1), gt).terms.total;
  };

  Mlp::Cache cache;
  const auto [pred, raw] = predict(&cache);
  const SetLossResult r = set_loss(std::span(&pred, 1), gt);
  Mat d_raw(n, 4);
  for (int q = 0; q < n; ++q) {
    const DecodeJacobian j = decode_box_jacobian({refs(q, 0), refs(q, 1)}, {raw(q, 0), raw(q, 1), raw(q, 2), raw(q, 3)});
    d_raw.row(q) << r.d_boxes[0](q, 0) * j.d_raw.x, r.d_boxes[0](q, 1) * j.d_raw.y, r.d_boxes[0](q, 2) * j.d_raw.w,
        r.d_boxes[0](q, 3) * j.d_raw.h;
  }
  ParamList plist;
  cls.collect(plist, "class_head");
  box.collect(plist, "box_head");
  for (auto& p : plist) p.param->zero_grad();
  const Mat d_hidden = box.backward(cache, d_raw) + cls.backward(hidden, r.d_logits[0]);

  col.check("set_loss.hidden", loss, hidden, d_hidden);
  for (auto& p : plist) {
    const Mat analytic = p.param->grad;
    col.check("set_loss." + p.name, loss, p.param->value, analytic);
  }
}

}  // namespace

bool GradCheckReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

GradCheckReport run_gradcheck_suite(const GradCheckOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  Collector col(opts);
  Rng rng(opts.seed);
  for (int i = 0; i < opts.instances; ++i) {
    check_deform(col, ReferenceKind::Normalized, rng);
    check_deform(col, ReferenceKind::Box, rng);
    check_boxes(col, rng);
    check_blocked_path(col, rng);
    check_set_loss(col, rng);
  }
  GradCheckReport report;
  report.entries = col.take();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace ddetr
