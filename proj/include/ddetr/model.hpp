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
#include <optional>
#include <string>
#include <vector>

#include "ddetr/boxes.hpp"
#include "ddetr/loss.hpp"
#include "ddetr/pyramid.hpp"
#include "ddetr/transformer.hpp"

namespace ddetr {

enum class DetectorMode { Plain, Refine, TwoStage };
enum class HeadSharing { Auto, Shared, Separate };

std::string to_string(DetectorMode m);
DetectorMode parse_mode(const std::string& s);
std::string to_string(AttentionKind k);
AttentionKind parse_attention(const std::string& s);

struct ModelConfig {
  int image_size = 64;
  int num_classes = 3;
  int channels = 64;
  int heads = 8;
  int points = 4;
  int levels = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int queries = 30;
  int ffn_hidden = 0;  // 0 means 4 * channels
  int stem_width = 16;
  int input_stage = 0;  // first backbone stage (stride 8 << input_stage) fed to the encoder
  DetectorMode mode = DetectorMode::Plain;
  AttentionKind attention = AttentionKind::Deformable;
  HeadSharing head_sharing = HeadSharing::Auto;  // Auto: shared in plain mode only
  double initial_box_size = kInitialBoxSize;
  double proposal_scale = kProposalBaseScale;
  ExecutionOrder order = ExecutionOrder::Auto;

  AttnConfig attn() const;
  int hidden() const { return ffn_hidden > 0 ? ffn_hidden : 4 * channels; }
  bool shared_heads() const;
  bool box_references() const { return mode != DetectorMode::Plain; }
  void validate() const;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

struct Model {
  ModelConfig cfg;
  StemParams stem;
  Parameter scale_embed;  // [L, C]
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  Parameter query_pos;    // [N, C]; unused in two-stage mode
  Linear reference_proj;  // C -> 2; unused in two-stage mode
  std::vector<Linear> class_heads;
  std::vector<Mlp> box_heads;
  ProposalHead proposal_head;  // two-stage only
  Linear proposal_pos;         // two-stage only: box sine embedding -> query_pos

  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  /// Every learnable tensor with optimizer hints: reference and sampling-offset
  /// projections carry `offset_lr_scale`.
  ParamList parameters(double offset_lr_scale = 0.1);
  void zero_grad();
  std::size_t num_parameters();
};

/// Per decoder layer, the box each query starts from when that box is gradient-blocked
/// (refine layers after the first, every two-stage layer); empty otherwise.
using DetachedBoxes = std::vector<std::vector<BoxN>>;

struct ModelOutput {
  std::vector<LayerPrediction> layers;        // one per decoder layer
  std::vector<Mat> references;                // reference rows fed to each decoder layer
  std::optional<LayerPrediction> proposals;   // two-stage: every encoder token
  DetachedBoxes detached;
};

/// Everything backward needs, filled by run_model.
struct ModelCache {
  PyramidCache pyramid;
  std::vector<LevelShape> shapes;
  Mat pos;   // [T, C]
  std::vector<EncoderLayer::Cache> encoder;
  Mat memory;
  ProposalCache proposal;
  std::vector<int> proposal_levels;
  Mat proposal_embed;  // two-stage: sine embedding of the selected boxes
  Mat query_pos;
  Mat references;  // [N, 2] predicted references (plain/refine)
  std::vector<DecoderLayer::Cache> decoder;
  std::vector<Mat> hidden;  // decoder layer outputs
  std::vector<Mlp::Cache> box_head;
  std::vector<Mat> raw_boxes;
  std::vector<std::vector<BoxN>> prev_boxes;  // refine/two-stage: input box of each layer
  std::vector<Mat> layer_refs;
};

/// Image is [3, H, W] with H = W = cfg.image_size. When `frozen` is given, its non-empty
/// entries replace the detached boxes, so the rest of the graph can be probed with the
/// blocked inputs held constant (finite-difference checks).
ModelOutput run_model(const Model& model, const FeatureMap& image, ModelCache* cache = nullptr,
                      MacCounter* macs = nullptr, const DetachedBoxes* frozen = nullptr);

/// Loss gradients for one forward pass.
struct OutputGrads {
  std::vector<Mat> d_logits;  // per decoder layer
  std::vector<Mat> d_boxes;
  Mat d_proposal_logits;      // two-stage only
  Mat d_proposal_boxes;
};

/// Accumulates parameter gradients.
void backward_model(Model& model, const ModelCache& cache, const OutputGrads& grads);

struct StepResult {
  LossTerms decoder;
  LossTerms proposals;
  double total = 0.0;
};

/// Set loss over all decoder layers (plus the proposal loss in two-stage mode, with
/// every class mapped to foreground). With `accumulate`, gradients are added to the
/// model's parameters.
StepResult model_loss(Model& model, const FeatureMap& image, std::span<const GroundTruthBox> gt, bool accumulate,
                      const LossWeights& w = {}, const FocalParams& fp = {}, MacCounter* macs = nullptr,
                      const DetachedBoxes* frozen = nullptr);

/// Final-layer detections: every (query, class) pair with its score, best first.
struct ScoredBox {
  int cls = 0;
  double score = 0.0;
  BoxN box;
};
std::vector<ScoredBox> top_detections(const LayerPrediction& pred, int max_detections);

}  // namespace ddetr
