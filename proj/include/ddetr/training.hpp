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
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ddetr/dataset.hpp"
#include "ddetr/evaluation.hpp"
#include "ddetr/model.hpp"

namespace ddetr {

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.1;        // global gradient-norm cap; <= 0 disables
  double offset_lr_scale = 0.1;  // reference-point and sampling-offset projections
  int lr_drop_epoch = 0;         // lr is multiplied by lr_drop_factor after this epoch; 0 disables
  double lr_drop_factor = 0.1;
  int batch_size = 4;
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  SceneSpec scene;
  int train_images = 2000;
  int val_images = 200;
  int epochs = 30;
  std::uint64_t seed = 1;  // model init and shuffling
  int max_detections = 100;

  void validate() const;
};

/// Training and validation sets drawn from cfg.scene; the validation set uses
/// scene.seed + 1 so the two never share images.
struct Splits {
  Dataset train;
  Dataset val;
};
Splits make_splits(const RunConfig& cfg);

/// Reduced desk task for convergence and ablation runs: 600 training and 200
/// validation images, 16 epochs, learning rate divided by 10 after epoch 12.
RunConfig toy_preset();

/// Adam with decoupled weight decay. Per-parameter lr scales and decay flags come from
/// the ParamRef list.
class AdamW {
 public:
  AdamW(ParamList params, const OptimConfig& cfg);
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  ParamList params_;
  OptimConfig cfg_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  std::int64_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

double learning_rate(const OptimConfig& cfg, int epoch);

struct EvalResult {
  ApSummary ap;
  LossTerms loss;  // decoder + proposal terms, averaged per image
  std::vector<DetectionRecord> detections;
  std::vector<DetectionRecord> ground_truth;
  std::uint64_t macs = 0;
};

EvalResult evaluate(const Model& model, const Dataset& data, int max_detections = 100);

/// One line of the training log. Epoch 0 describes the initial model.
struct MetricsRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over the epoch's images; 0 at epoch 0
  double val_loss = 0.0;
  double val_cls = 0.0;
  double val_l1 = 0.0;
  double val_giou = 0.0;
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t macs = 0;  // forward MACs over the epoch's training images
};

std::string metrics_to_json(const MetricsRow& row);
MetricsRow metrics_from_json(const std::string& line);
std::vector<MetricsRow> read_metrics_log(const std::filesystem::path& path);

/// Column order of the exported CSV.
const std::vector<std::string>& metrics_csv_header();
/// Writes the CSV (header plus one row per logged epoch, sorted by epoch).
/// Throws std::runtime_error when the log file does not exist.
void export_curves(const std::filesystem::path& log_path, const std::filesystem::path& csv_path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct TrainResult {
  Model model;
  std::vector<MetricsRow> log;
};

/// Runs `cfg.epochs` epochs over `train_set`, evaluating on `val_set` after each epoch
/// (and once before training). `on_epoch` sees every row as it is produced. Throws
/// std::runtime_error with a diagnostic when the loss becomes non-finite.
TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                  const std::function<void(const MetricsRow&)>& on_epoch = {});

/// First epoch whose AP@0.5 reaches `threshold`, or -1.
int epochs_to_threshold(const std::vector<MetricsRow>& log, double threshold);

}  // namespace ddetr
