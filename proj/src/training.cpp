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

#include "ddetr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ddetr {

void RunConfig::validate() const {
  model.validate();
  scene.validate();
  if (scene.image_size != model.image_size) throw std::invalid_argument("run config: scene and model image sizes differ");
  if (scene.max_objects > model.queries) throw std::invalid_argument("run config: more objects than queries");
  if (epochs < 0 || train_images < 0 || val_images < 0) throw std::invalid_argument("run config: negative count");
  if (optim.batch_size < 1) throw std::invalid_argument("run config: batch size must be positive");
  if (!(optim.lr > 0.0)) throw std::invalid_argument("run config: learning rate must be positive");
}

AdamW::AdamW(ParamList params, const OptimConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
    v_.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i].param;
    const double plr = lr * params_[i].lr_scale;
    if (params_[i].decay && cfg_.weight_decay > 0.0) p.value *= 1.0 - plr * cfg_.weight_decay;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= plr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) sq += p.param->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-6);
    for (const auto& p : params) p.param->grad *= s;
  }
  return norm;
}

double learning_rate(const OptimConfig& cfg, int epoch) {
  return (cfg.lr_drop_epoch > 0 && epoch > cfg.lr_drop_epoch) ? cfg.lr * cfg.lr_drop_factor : cfg.lr;
}

Splits make_splits(const RunConfig& cfg) {
  SceneSpec val_spec = cfg.scene;
  val_spec.seed = cfg.scene.seed + 1;
  return {gen_dataset(cfg.scene, cfg.train_images), gen_dataset(val_spec, cfg.val_images)};
}

RunConfig toy_preset() {
  RunConfig r;
  r.train_images = 600;
  r.val_images = 200;
  r.epochs = 16;
  r.optim.lr_drop_epoch = 12;
  r.optim.lr_drop_factor = 0.1;
  return r;
}

EvalResult evaluate(const Model& model, const Dataset& data, int max_detections) {
  EvalResult r;
  MacCounter macs;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const ModelOutput out = run_model(model, s.image(data.image_size()), nullptr, &macs);
    const SetLossResult dec = set_loss(out.layers, s.labels);
    r.loss += dec.terms;
    if (out.proposals) {
      std::vector<GroundTruthBox> fg = s.labels;
      for (auto& g : fg) g.cls = 0;
      r.loss += set_loss(std::span(&*out.proposals, 1), fg).terms;
    }
    const int id = static_cast<int>(i);
    for (const auto& d : top_detections(out.layers.back(), max_detections)) {
      r.detections.push_back({id, d.cls, d.box, d.score});
    }
    for (const auto& g : s.labels) r.ground_truth.push_back({id, g.cls, g.box, 1.0});
  }
  if (!data.samples.empty()) {
    const double n = static_cast<double>(data.samples.size());
    r.loss.total /= n;
    r.loss.cls /= n;
    r.loss.l1 /= n;
    r.loss.giou /= n;
  }
  r.ap = compute_ap(r.detections, r.ground_truth);
  r.macs = macs.macs;
  return r;
}

std::string metrics_to_json(const MetricsRow& row) {
  nlohmann::ordered_json j;
  j["epoch"] = row.epoch;
  j["lr"] = row.lr;
  j["train_loss"] = row.train_loss;
  j["val_loss"] = row.val_loss;
  j["val_cls"] = row.val_cls;
  j["val_l1"] = row.val_l1;
  j["val_giou"] = row.val_giou;
  j["ap"] = row.ap;
  j["ap50"] = row.ap50;
  j["ap75"] = row.ap75;
  j["ap_small"] = row.ap_small;
  j["ap_medium"] = row.ap_medium;
  j["ap_large"] = row.ap_large;
  j["wall_seconds"] = row.wall_seconds;
  j["macs"] = row.macs;
  return j.dump();
}

MetricsRow metrics_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRow r;
  r.epoch = j.at("epoch");
  r.lr = j.at("lr");
  r.train_loss = j.at("train_loss");
  r.val_loss = j.at("val_loss");
  r.val_cls = j.at("val_cls");
  r.val_l1 = j.at("val_l1");
  r.val_giou = j.at("val_giou");
  r.ap = j.at("ap");
  r.ap50 = j.at("ap50");
  r.ap75 = j.at("ap75");
  r.ap_small = j.at("ap_small");
  r.ap_medium = j.at("ap_medium");
  r.ap_large = j.at("ap_large");
  r.wall_seconds = j.at("wall_seconds");
  r.macs = j.at("macs");
  return r;
}

std::vector<MetricsRow> read_metrics_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics log not found: " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(metrics_from_json(line));
  }
  return rows;
}

const std::vector<std::string>& metrics_csv_header() {
  static const std::vector<std::string> header = {"epoch",  "lr",       "train_loss", "val_loss",  "val_cls",
                                                  "val_l1", "val_giou", "ap",         "ap50",      "ap75",
                                                  "ap_small", "ap_medium", "ap_large", "wall_seconds", "macs"};
  return header;
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void export_curves(const std::filesystem::path& log_path, const std::filesystem::path& csv_path) {
  std::vector<MetricsRow> rows = read_metrics_log(log_path);
  std::stable_sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) { return a.epoch < b.epoch; });
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot write " + csv_path.string());
  const auto& h = metrics_csv_header();
  for (std::size_t i = 0; i < h.size(); ++i) out << (i ? "," : "") << h[i];
  out << '\n';
  for (const auto& r : rows) {
    out << r.epoch << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ','
        << format_double(r.val_loss) << ',' << format_double(r.val_cls) << ',' << format_double(r.val_l1) << ','
        << format_double(r.val_giou) << ',' << format_double(r.ap) << ',' << format_double(r.ap50) << ','
        << format_double(r.ap75) << ',' << format_double(r.ap_small) << ',' << format_double(r.ap_medium) << ','
        << format_double(r.ap_large) << ',' << format_double(r.wall_seconds) << ',' << r.macs << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics csv not found: " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != metrics_csv_header().size()) throw std::runtime_error("metrics csv: bad column count");
    MetricsRow r;
    r.epoch = std::stoi(f[0]);
    double* fields[] = {&r.lr,   &r.train_loss, &r.val_loss, &r.val_cls,  &r.val_l1,    &r.val_giou,
                        &r.ap,   &r.ap50,       &r.ap75,     &r.ap_small, &r.ap_medium, &r.ap_large,
                        &r.wall_seconds};
    for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = std::stod(f[i + 1]);
    r.macs = std::stoull(f[14]);
    rows.push_back(r);
  }
  return rows;
}

namespace {

MetricsRow eval_row(const Model& model, const Dataset& val, int epoch, double lr, int max_det) {
  const EvalResult e = evaluate(model, val, max_det);
  MetricsRow row;
  row.epoch = epoch;
  row.lr = lr;
  row.val_loss = e.loss.total;
  row.val_cls = e.loss.cls;
  row.val_l1 = e.loss.l1;
  row.val_giou = e.loss.giou;
  row.ap = e.ap.ap;
  row.ap50 = e.ap.ap50;
  row.ap75 = e.ap.ap75;
  row.ap_small = e.ap.ap_small;
  row.ap_medium = e.ap.ap_medium;
  row.ap_large = e.ap.ap_large;
  return row;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                  const std::function<void(const MetricsRow&)>& on_epoch) {
  cfg.validate();
  if (train_set.image_size() != cfg.model.image_size || val_set.image_size() != cfg.model.image_size) {
    throw std::invalid_argument("train: dataset image size does not match the model");
  }
  TrainResult res{Model::init(cfg.model, cfg.seed), {}};
  Model& model = res.model;
  const ParamList params = model.parameters(cfg.optim.offset_lr_scale);
  AdamW opt(params, cfg.optim);
  Rng shuffle_rng(cfg.seed ^ 0x5eedULL);

  const auto emit = [&](MetricsRow row) {
    res.log.push_back(row);
    if (on_epoch) on_epoch(row);
  };
  const auto t_start = std::chrono::steady_clock::now();
  {
    MetricsRow row = eval_row(model, val_set, 0, learning_rate(cfg.optim, 1), cfg.max_detections);
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    emit(row);
  }

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const int n_classes = cfg.model.num_classes;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = learning_rate(cfg.optim, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    MacCounter macs;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.optim.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.optim.batch_size));
      model.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = train_set.samples[order[b]];
        for (const auto& g : s.labels) {
          if (g.cls < 0 || g.cls >= n_classes) throw std::invalid_argument("train: label class out of range");
        }
        const StepResult r = model_loss(model, s.image(train_set.image_size()), s.labels, true, {}, {}, &macs);
        if (!std::isfinite(r.total)) {
          throw std::runtime_error("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", image " + std::to_string(order[b]) + " (step " +
                                   std::to_string(opt.steps()) + ")");
        }
        loss_sum += r.total;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (const auto& p : params) p.param->grad *= inv;
      const double norm = clip_grad_norm(params, cfg.optim.clip_norm);
      if (!std::isfinite(norm)) {
        throw std::runtime_error("training diverged: non-finite gradient at epoch " + std::to_string(epoch));
      }
      opt.step(lr);
    }
    MetricsRow row = eval_row(model, val_set, epoch, lr, cfg.max_detections);
    row.train_loss = train_set.size() > 0 ? loss_sum / static_cast<double>(train_set.size()) : 0.0;
    row.macs = macs.macs;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    emit(row);
  }
  return res;
}

int epochs_to_threshold(const std::vector<MetricsRow>& log, double threshold) {
  for (const auto& r : log) {
    if (r.ap50 >= threshold) return r.epoch;
  }
  return -1;
}

}  // namespace ddetr
