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

#include "ddetr/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace ddetr {

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::pair<E, const char*> (&table)[N], const char* what) {
  for (const auto& [value, name] : table) {
    if (s == name) return value;
  }
  throw std::invalid_argument(std::string("unknown ") + what + ": " + s);
}

template <typename E, std::size_t N>
std::string enum_name(E v, const std::pair<E, const char*> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (v == value) return name;
  }
  return "?";
}

constexpr std::pair<DetectorMode, const char*> kModes[] = {
    {DetectorMode::Plain, "plain"}, {DetectorMode::Refine, "refine"}, {DetectorMode::TwoStage, "two_stage"}};
constexpr std::pair<AttentionKind, const char*> kKinds[] = {{AttentionKind::Deformable, "deformable"},
                                                            {AttentionKind::Dense, "dense"}};
constexpr std::pair<HeadSharing, const char*> kSharing[] = {
    {HeadSharing::Auto, "auto"}, {HeadSharing::Shared, "shared"}, {HeadSharing::Separate, "separate"}};
constexpr std::pair<ExecutionOrder, const char*> kOrders[] = {
    {ExecutionOrder::ProjectThenSample, "project_then_sample"},
    {ExecutionOrder::SampleThenProject, "sample_then_project"},
    {ExecutionOrder::Auto, "auto"}};

double logit_prior(double p) { return -std::log((1.0 - p) / p); }

int total_tokens(const ModelConfig& cfg) {
  int total = 0;
  int size = cfg.image_size / (8 << cfg.input_stage);
  for (int l = 0; l < cfg.levels; ++l) {
    total += size * size;
    size = (size + 1) / 2;
  }
  return total;
}

}  // namespace

std::string to_string(DetectorMode m) { return enum_name(m, kModes); }
DetectorMode parse_mode(const std::string& s) { return parse_enum(s, kModes, "mode"); }
std::string to_string(AttentionKind k) { return enum_name(k, kKinds); }
AttentionKind parse_attention(const std::string& s) { return parse_enum(s, kKinds, "attention kind"); }

AttnConfig ModelConfig::attn() const {
  AttnConfig a;
  a.heads = heads;
  a.channels = channels;
  a.points = points;
  a.levels = levels;
  return a;
}

bool ModelConfig::shared_heads() const {
  switch (head_sharing) {
    case HeadSharing::Shared:
      return true;
    case HeadSharing::Separate:
      return false;
    case HeadSharing::Auto:
      break;
  }
  return mode == DetectorMode::Plain;
}

void ModelConfig::validate() const {
  attn().validate();
  if (num_classes < 1 || queries < 1 || encoder_layers < 1 || decoder_layers < 1 || stem_width < 1) {
    throw std::invalid_argument("model config: sizes must be positive");
  }
  if (encoder_layers > 6 || decoder_layers > 6) throw std::invalid_argument("model config: at most 6 layers");
  if (channels % 4 != 0) throw std::invalid_argument("model config: channels must be a multiple of 4");
  if (input_stage < 0 || input_stage > 2) throw std::invalid_argument("model config: input stage must be 0, 1 or 2");
  const int div = 1 << (2 + input_stage + StemParams::output_stages(levels, input_stage));
  if (image_size < div || image_size % div != 0) {
    throw std::invalid_argument("model config: image size must be a multiple of " + std::to_string(div));
  }
  if (!(initial_box_size > 0.0 && initial_box_size < 1.0) || !(proposal_scale > 0.0 && proposal_scale < 1.0)) {
    throw std::invalid_argument("model config: box priors must lie in (0, 1)");
  }
  if (mode == DetectorMode::TwoStage && queries > total_tokens(*this)) {
    throw std::invalid_argument("model config: more queries than encoder tokens in two-stage mode");
  }
}

std::string config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["num_classes"] = c.num_classes;
  j["channels"] = c.channels;
  j["heads"] = c.heads;
  j["points"] = c.points;
  j["levels"] = c.levels;
  j["encoder_layers"] = c.encoder_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["queries"] = c.queries;
  j["ffn_hidden"] = c.ffn_hidden;
  j["stem_width"] = c.stem_width;
  j["input_stage"] = c.input_stage;
  j["mode"] = to_string(c.mode);
  j["attention"] = to_string(c.attention);
  j["head_sharing"] = enum_name(c.head_sharing, kSharing);
  j["initial_box_size"] = c.initial_box_size;
  j["proposal_scale"] = c.proposal_scale;
  j["order"] = enum_name(c.order, kOrders);
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.image_size = j.at("image_size");
  c.num_classes = j.at("num_classes");
  c.channels = j.at("channels");
  c.heads = j.at("heads");
  c.points = j.at("points");
  c.levels = j.at("levels");
  c.encoder_layers = j.at("encoder_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.queries = j.at("queries");
  c.ffn_hidden = j.at("ffn_hidden");
  c.stem_width = j.at("stem_width");
  c.input_stage = j.at("input_stage");
  c.mode = parse_mode(j.at("mode"));
  c.attention = parse_attention(j.at("attention"));
  c.head_sharing = parse_enum(j.at("head_sharing").get<std::string>(), kSharing, "head sharing");
  c.initial_box_size = j.at("initial_box_size");
  c.proposal_scale = j.at("proposal_scale");
  c.order = parse_enum(j.at("order").get<std::string>(), kOrders, "execution order");
  return c;
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  const AttnConfig attn = cfg.attn();
  const int c = cfg.channels;
  m.stem = StemParams::init(cfg.stem_width, c, cfg.levels, rng, cfg.input_stage);
  m.scale_embed = Parameter(normal_matrix(cfg.levels, c, 0.02, rng));
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    m.encoder.push_back(EncoderLayer::init(attn, cfg.hidden(), cfg.attention, rng));
  }
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    m.decoder.push_back(DecoderLayer::init(attn, cfg.hidden(), cfg.attention, cfg.box_references(), rng));
  }
  if (cfg.mode != DetectorMode::TwoStage) {
    m.query_pos = Parameter(normal_matrix(cfg.queries, c, 1.0, rng));
    m.reference_proj = Linear::xavier(c, 2, rng);
  }
  const int n_heads = cfg.shared_heads() ? 1 : cfg.decoder_layers;
  for (int i = 0; i < n_heads; ++i) {
    Linear cls = Linear::xavier(c, cfg.num_classes, rng);
    cls.bias.value.setConstant(logit_prior(0.01));
    Mlp box(c, c, 4, 3, rng);
    box.layers.back().weight.value.setZero();
    box.layers.back().bias.value.setZero();
    // Plain decoding predicts sizes directly; start them small.
    if (cfg.mode == DetectorMode::Plain) box.layers.back().bias.value.rightCols(2).setConstant(-2.0);
    m.class_heads.push_back(std::move(cls));
    m.box_heads.push_back(std::move(box));
  }
  if (cfg.mode == DetectorMode::TwoStage) {
    m.proposal_head = ProposalHead::init(c, rng);
    m.proposal_pos = Linear::xavier(c, c, rng);
  }
  return m;
}

ParamList Model::parameters(double offset_lr_scale) {
  ParamList out;
  stem.collect(out, "backbone");
  out.push_back({"scale_embed", &scale_embed, 1.0, true});
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    encoder[i].collect(out, "encoder." + std::to_string(i), offset_lr_scale);
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    decoder[i].collect(out, "decoder." + std::to_string(i), offset_lr_scale);
  }
  if (cfg.mode != DetectorMode::TwoStage) {
    out.push_back({"query_pos", &query_pos, 1.0, true});
    reference_proj.collect(out, "reference_points", offset_lr_scale);
  }
  for (std::size_t i = 0; i < class_heads.size(); ++i) {
    class_heads[i].collect(out, "class_head." + std::to_string(i));
    box_heads[i].collect(out, "box_head." + std::to_string(i));
  }
  if (cfg.mode == DetectorMode::TwoStage) {
    proposal_head.collect(out, "proposal_head");
    proposal_pos.collect(out, "proposal_pos");
  }
  return out;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.param->zero_grad();
}

std::size_t Model::num_parameters() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += static_cast<std::size_t>(p.param->size());
  return n;
}

namespace {

Mat box_sine_embedding(std::span<const BoxN> boxes, int channels) {
  Mat emb(static_cast<Eigen::Index>(boxes.size()), channels);
  const int half = channels / 2;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    double* row = emb.row(static_cast<Eigen::Index>(i)).data();
    sine_embed_point(boxes[i].cx, boxes[i].cy, half, row);
    sine_embed_point(boxes[i].w, boxes[i].h, half, row + half);
  }
  return emb;
}

RawBox raw_row(const Mat& raw, Eigen::Index q) { return {raw(q, 0), raw(q, 1), raw(q, 2), raw(q, 3)}; }

}  // namespace

ModelOutput run_model(const Model& model, const FeatureMap& image, ModelCache* cache, MacCounter* macs,
                      const DetachedBoxes* frozen) {
  const ModelConfig& cfg = model.cfg;
  if (image.height != cfg.image_size || image.width != cfg.image_size) {
    throw std::invalid_argument("run_model: image size does not match config");
  }
  const AttnConfig attn = cfg.attn();
  const bool keep = cache != nullptr;
  ModelCache local;
  ModelCache& c = keep ? *cache : local;
  c = ModelCache{};

  const FeaturePyramid pyr = build_pyramid(image, model.stem, keep ? &c.pyramid : nullptr, macs);
  FlatFeatures x = pyr.flatten();
  c.shapes = x.shapes;
  c.pos = level_position_tokens(x.shapes, model.scale_embed.value);
  const Mat enc_refs = encoder_reference_points(x.shapes);
  c.encoder.resize(model.encoder.size());
  for (std::size_t e = 0; e < model.encoder.size(); ++e) {
    x.tokens = model.encoder[e].forward(x, c.pos, enc_refs, attn, cfg.order, keep ? &c.encoder[e] : nullptr, macs);
  }
  c.memory = x.tokens;

  ModelOutput out;
  const int n = cfg.queries;
  std::vector<BoxN> prev;
  if (cfg.mode == DetectorMode::TwoStage) {
    const auto props = propose_first_stage(x, model.proposal_head, cfg.proposal_scale, &c.proposal, macs);
    LayerPrediction pp;
    pp.logits = c.proposal.logit;
    for (const auto& p : props) pp.boxes.push_back(p.box);
    out.proposals = std::move(pp);
    for (const auto& p : top_k_proposals(props, n)) prev.push_back(p.box);
    if (frozen != nullptr && !frozen->empty() && !frozen->front().empty()) {
      if (frozen->front().size() != prev.size()) throw std::invalid_argument("run_model: frozen box count mismatch");
      prev = frozen->front();
    }
    c.proposal_embed = box_sine_embedding(prev, cfg.channels);
    c.query_pos = model.proposal_pos.forward(c.proposal_embed, macs);
  } else {
    c.query_pos = model.query_pos.value;
    c.references = predict_reference_points(c.query_pos, model.reference_proj, macs);
    if (cfg.mode == DetectorMode::Refine) {
      for (int q = 0; q < n; ++q) {
        prev.push_back(initial_box({c.references(q, 0), c.references(q, 1)}, cfg.initial_box_size));
      }
    }
  }

  const ReferenceKind kind = cfg.box_references() ? ReferenceKind::Box : ReferenceKind::Normalized;
  const std::size_t n_layers = model.decoder.size();
  c.decoder.resize(n_layers);
  c.box_head.resize(n_layers);
  Mat tgt = Mat::Zero(n, cfg.channels);
  const auto blocked = [&](std::size_t d) { return cfg.mode == DetectorMode::TwoStage || d > 0; };
  for (std::size_t d = 0; d < n_layers; ++d) {
    const std::size_t h = cfg.shared_heads() ? 0 : d;
    if (cfg.box_references() && blocked(d)) {
      if (frozen != nullptr && d < frozen->size() && !(*frozen)[d].empty()) {
        if ((*frozen)[d].size() != prev.size()) throw std::invalid_argument("run_model: frozen box count mismatch");
        prev = (*frozen)[d];
      }
      out.detached.push_back(prev);
    } else {
      out.detached.emplace_back();
    }
    Mat refs = cfg.box_references() ? box_references(prev) : c.references;
    Mat hs = model.decoder[d].forward(tgt, c.query_pos, refs, kind, x, c.pos, attn, cfg.order,
                                      keep ? &c.decoder[d] : nullptr, macs);
    LayerPrediction pred;
    pred.logits = model.class_heads[h].forward(hs, macs);
    Mat raw = model.box_heads[h].forward(hs, &c.box_head[d], macs);
    pred.boxes.reserve(static_cast<std::size_t>(n));
    for (int q = 0; q < n; ++q) {
      if (cfg.box_references()) {
        pred.boxes.push_back(refine_box(prev[static_cast<std::size_t>(q)], raw_row(raw, q)));
      } else {
        pred.boxes.push_back(decode_box({c.references(q, 0), c.references(q, 1)}, raw_row(raw, q)));
      }
    }
    if (cfg.box_references()) {
      c.prev_boxes.push_back(prev);
      prev = pred.boxes;
    }
    out.references.push_back(refs);
    c.layer_refs.push_back(std::move(refs));
    c.hidden.push_back(hs);
    c.raw_boxes.push_back(std::move(raw));
    out.layers.push_back(std::move(pred));
    tgt = std::move(hs);
  }
  return out;
}

void backward_model(Model& model, const ModelCache& c, const OutputGrads& grads) {
  const ModelConfig& cfg = model.cfg;
  const AttnConfig attn = cfg.attn();
  const int n = cfg.queries;
  const std::size_t n_layers = model.decoder.size();
  if (grads.d_logits.size() != n_layers || grads.d_boxes.size() != n_layers) {
    throw std::invalid_argument("backward_model: one gradient per decoder layer required");
  }

  Mat d_memory = Mat::Zero(c.memory.rows(), c.memory.cols());
  Mat d_pos = Mat::Zero(c.pos.rows(), c.pos.cols());
  Mat d_query_pos = Mat::Zero(n, cfg.channels);
  Mat d_refs = Mat::Zero(n, 2);
  Mat d_next;

  for (std::size_t d = n_layers; d-- > 0;) {
    const std::size_t h = cfg.shared_heads() ? 0 : d;
    const Mat& raw = c.raw_boxes[d];
    const Mat& d_box = grads.d_boxes[d];
    Mat d_raw(n, 4);
    for (int q = 0; q < n; ++q) {
      if (cfg.box_references()) {
        const RawBox j = refine_box_jacobian(c.prev_boxes[d][static_cast<std::size_t>(q)], raw_row(raw, q));
        d_raw.row(q) << d_box(q, 0) * j.x, d_box(q, 1) * j.y, d_box(q, 2) * j.w, d_box(q, 3) * j.h;
        if (cfg.mode == DetectorMode::Refine && d == 0) {
          // The initial box is built from the predicted reference, not from a previous
          // layer, so its center stays differentiable.
          d_refs(q, 0) += d_box(q, 0) * j.x * inverse_sigmoid_grad(c.references(q, 0));
          d_refs(q, 1) += d_box(q, 1) * j.y * inverse_sigmoid_grad(c.references(q, 1));
        }
      } else {
        const DecodeJacobian j = decode_box_jacobian({c.references(q, 0), c.references(q, 1)}, raw_row(raw, q));
        d_raw.row(q) << d_box(q, 0) * j.d_raw.x, d_box(q, 1) * j.d_raw.y, d_box(q, 2) * j.d_raw.w,
            d_box(q, 3) * j.d_raw.h;
        d_refs(q, 0) += d_box(q, 0) * j.d_reference.x;
        d_refs(q, 1) += d_box(q, 1) * j.d_reference.y;
      }
    }
    Mat d_hidden = model.box_heads[h].backward(c.box_head[d], d_raw);
    d_hidden += model.class_heads[h].backward(c.hidden[d], grads.d_logits[d]);
    if (d_next.size() > 0) d_hidden += d_next;

    DecoderLayer::Grads g = model.decoder[d].backward(attn, c.decoder[d], d_hidden);
    d_next = std::move(g.d_tgt);
    d_query_pos += g.d_query_pos;
    d_memory += g.d_memory;
    if (g.d_memory_pos.size() > 0) d_pos += g.d_memory_pos;
    if (g.d_refs.size() > 0) {
      if (cfg.mode == DetectorMode::Plain) {
        d_refs += g.d_refs;
      } else if (cfg.mode == DetectorMode::Refine && d == 0) {
        // The initial box center is the predicted reference; later boxes are detached.
        d_refs += g.d_refs.leftCols(2);
      }
    }
  }

  if (cfg.mode == DetectorMode::TwoStage) {
    model.proposal_pos.backward(c.proposal_embed, d_query_pos);
    const auto t = c.memory.rows();
    if (grads.d_proposal_logits.rows() != t || grads.d_proposal_boxes.rows() != t) {
      throw std::invalid_argument("backward_model: proposal gradients required in two-stage mode");
    }
    // Proposal boxes are sigmoid outputs; d box / d raw = s (1 - s) per coordinate.
    Mat d_raw(t, 4);
    const auto refs = encoder_reference_points(c.shapes);
    std::vector<int> level_of;
    for (std::size_t l = 0; l < c.shapes.size(); ++l) level_of.insert(level_of.end(), c.shapes[l].size(), int(l));
    for (Eigen::Index i = 0; i < t; ++i) {
      const BoxN b = decode_proposal({refs(i, 0), refs(i, 1)}, level_of[static_cast<std::size_t>(i)],
                                     raw_row(c.proposal.raw, i), cfg.proposal_scale);
      const double s[4] = {b.cx, b.cy, b.w, b.h};
      for (int k = 0; k < 4; ++k) d_raw(i, k) = grads.d_proposal_boxes(i, k) * s[k] * (1.0 - s[k]);
    }
    d_memory += model.proposal_head.box.backward(c.proposal.box, d_raw);
    d_memory += model.proposal_head.cls.backward(c.memory, grads.d_proposal_logits);
  } else {
    d_query_pos += predict_reference_points_backward(model.reference_proj, c.query_pos, c.references, d_refs);
    model.query_pos.grad += d_query_pos;
  }

  Mat d_x = std::move(d_memory);
  for (std::size_t e = model.encoder.size(); e-- > 0;) {
    EncoderLayer::Grads g = model.encoder[e].backward(attn, c.encoder[e], d_x);
    d_x = std::move(g.d_src);
    d_pos += g.d_pos;
  }

  std::vector<Mat> d_levels;
  Eigen::Index row = 0;
  for (std::size_t l = 0; l < c.shapes.size(); ++l) {
    const Eigen::Index sz = c.shapes[l].size();
    model.scale_embed.grad.row(static_cast<Eigen::Index>(l)) += d_pos.middleRows(row, sz).colwise().sum();
    d_levels.push_back(d_x.middleRows(row, sz));
    row += sz;
  }
  build_pyramid_backward(model.stem, c.pyramid, d_levels);
}

StepResult model_loss(Model& model, const FeatureMap& image, std::span<const GroundTruthBox> gt, bool accumulate,
                      const LossWeights& w, const FocalParams& fp, MacCounter* macs,
                      const DetachedBoxes* frozen) {
  ModelCache cache;
  const ModelOutput out = run_model(model, image, accumulate ? &cache : nullptr, macs, frozen);
  SetLossResult dec = set_loss(out.layers, gt, w, fp);
  StepResult r;
  r.decoder = dec.terms;
  OutputGrads grads;
  if (out.proposals) {
    std::vector<GroundTruthBox> fg(gt.begin(), gt.end());
    for (auto& g : fg) g.cls = 0;
    SetLossResult enc = set_loss(std::span(&*out.proposals, 1), fg, w, fp);
    r.proposals = enc.terms;
    grads.d_proposal_logits = std::move(enc.d_logits[0]);
    grads.d_proposal_boxes = std::move(enc.d_boxes[0]);
  }
  r.total = r.decoder.total + r.proposals.total;
  if (accumulate) {
    grads.d_logits = std::move(dec.d_logits);
    grads.d_boxes = std::move(dec.d_boxes);
    backward_model(model, cache, grads);
  }
  return r;
}

std::vector<ScoredBox> top_detections(const LayerPrediction& pred, int max_detections) {
  const auto n = pred.logits.rows();
  const auto k = pred.logits.cols();
  std::vector<ScoredBox> all;
  all.reserve(static_cast<std::size_t>(n * k));
  for (Eigen::Index q = 0; q < n; ++q) {
    for (Eigen::Index c = 0; c < k; ++c) {
      all.push_back({static_cast<int>(c), sigmoid(pred.logits(q, c)), pred.boxes[static_cast<std::size_t>(q)]});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  if (static_cast<int>(all.size()) > max_detections) all.resize(static_cast<std::size_t>(max_detections));
  return all;
}

}  // namespace ddetr
