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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddetr/benchmark.hpp"
#include "ddetr/checkpoint.hpp"
#include "ddetr/gradcheck.hpp"
#include "ddetr/training.hpp"

namespace fs = std::filesystem;
using namespace ddetr;

namespace {

constexpr int kUsageError = 2;

struct ModelFlags {
  std::string mode = "plain";
  std::string attention = "deformable";
};

void add_model_options(CLI::App* app, ModelConfig& m, ModelFlags& f) {
  app->add_option("--image-size", m.image_size, "square image side in pixels")->capture_default_str();
  app->add_option("--channels", m.channels, "model width C")->capture_default_str();
  app->add_option("--heads", m.heads, "attention heads M")->capture_default_str();
  app->add_option("--points", m.points, "sampling points per level K")->capture_default_str();
  app->add_option("--levels", m.levels, "feature levels L")->capture_default_str();
  app->add_option("--input-stage", m.input_stage, "first backbone stage fed to the encoder (0..2)")
      ->capture_default_str();
  app->add_option("--encoder-layers", m.encoder_layers)->capture_default_str();
  app->add_option("--decoder-layers", m.decoder_layers)->capture_default_str();
  app->add_option("--queries", m.queries, "object queries N")->capture_default_str();
  app->add_option("--ffn-hidden", m.ffn_hidden, "feed-forward width, 0 for 4C")->capture_default_str();
  app->add_option("--stem-width", m.stem_width)->capture_default_str();
  app->add_option("--num-classes", m.num_classes)->capture_default_str();
  app->add_option("--mode", f.mode, "detector mode")
      ->check(CLI::IsMember({"plain", "refine", "two_stage"}))
      ->capture_default_str();
  app->add_option("--attention", f.attention, "attention kind")
      ->check(CLI::IsMember({"deformable", "dense"}))
      ->capture_default_str();
}

void finish_model(ModelConfig& m, const ModelFlags& f) {
  m.mode = parse_mode(f.mode);
  m.attention = parse_attention(f.attention);
}

void add_scene_options(CLI::App* app, SceneSpec& s) {
  app->add_option("--min-objects", s.min_objects)->capture_default_str();
  app->add_option("--max-objects", s.max_objects)->capture_default_str();
  app->add_option("--min-size", s.min_size, "smallest object side in pixels")->capture_default_str();
  app->add_option("--max-size", s.max_size, "largest object side in pixels")->capture_default_str();
  app->add_option("--noise", s.noise)->capture_default_str();
  app->add_option("--color-jitter", s.color_jitter)->capture_default_str();
  app->add_option("--data-seed", s.seed, "scene generator seed")->capture_default_str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

nlohmann::ordered_json ap_json(const ApSummary& ap) {
  nlohmann::ordered_json j;
  j["ap"] = ap.ap;
  j["ap50"] = ap.ap50;
  j["ap75"] = ap.ap75;
  j["ap_small"] = ap.ap_small;
  j["ap_medium"] = ap.ap_medium;
  j["ap_large"] = ap.ap_large;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformable-attention detector at desk scale: data generation, training, evaluation and checks"};
  app.set_config("--config", "", "INI file; [gen], [train], [eval] and [bench] sections hold flag values")
      ->configurable(false);
  app.require_subcommand(1);
  std::string out_dir = ".";

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic scene dataset");
  SceneSpec gen_spec;
  int gen_images = 2000;
  gen->add_option("--out-dir", out_dir, "dataset directory")->capture_default_str();
  gen->add_option("--images", gen_images)->capture_default_str();
  gen->add_option("--image-size", gen_spec.image_size)->capture_default_str();
  add_scene_options(gen, gen_spec);

  // train
  auto* tr = app.add_subcommand("train", "train a detector and log metrics every epoch");
  RunConfig run;
  ModelFlags train_flags;
  std::string train_data, val_data;
  tr->add_option("--out-dir", out_dir, "checkpoint and metrics directory")->capture_default_str();
  add_model_options(tr, run.model, train_flags);
  add_scene_options(tr, run.scene);
  tr->add_option("--epochs", run.epochs)->capture_default_str();
  tr->add_option("--seed", run.seed, "model initialization and shuffling seed")->capture_default_str();
  tr->add_option("--train-images", run.train_images)->capture_default_str();
  tr->add_option("--val-images", run.val_images)->capture_default_str();
  tr->add_option("--train-data", train_data, "dataset directory from gen (instead of generating)");
  tr->add_option("--val-data", val_data, "dataset directory from gen (instead of generating)");
  tr->add_option("--max-detections", run.max_detections)->capture_default_str();
  tr->add_option("--lr", run.optim.lr)->capture_default_str();
  tr->add_option("--weight-decay", run.optim.weight_decay)->capture_default_str();
  tr->add_option("--clip-norm", run.optim.clip_norm, "0 disables clipping")->capture_default_str();
  tr->add_option("--offset-lr-scale", run.optim.offset_lr_scale)->capture_default_str();
  tr->add_option("--lr-drop-epoch", run.optim.lr_drop_epoch, "0 disables the drop")->capture_default_str();
  tr->add_option("--lr-drop-factor", run.optim.lr_drop_factor)->capture_default_str();
  tr->add_option("--batch-size", run.optim.batch_size)->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "compute AP of a checkpoint");
  std::string checkpoint, eval_data;
  SceneSpec eval_spec;
  eval_spec.seed = 1;
  int eval_images = 200;
  int eval_max_det = 100;
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--out-dir", out_dir, "report directory")->capture_default_str();
  ev->add_option("--data", eval_data, "dataset directory from gen (instead of generating)");
  ev->add_option("--images", eval_images)->capture_default_str();
  ev->add_option("--max-detections", eval_max_det)->capture_default_str();
  add_scene_options(ev, eval_spec);

  // bench
  auto* be = app.add_subcommand("bench", "count attention MACs over a sweep of image sizes");
  ModelConfig bench_model;
  ModelFlags bench_flags;
  std::vector<int> sizes{192, 256, 320, 384, 512};
  std::uint64_t bench_seed = 1;
  be->add_option("--out-dir", out_dir, "bench.json directory")->capture_default_str();
  be->add_option("--sizes", sizes, "image sizes, at least four")->capture_default_str();
  be->add_option("--seed", bench_seed)->capture_default_str();
  add_model_options(be, bench_model, bench_flags);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
  GradCheckOptions gc_opts;
  gc->add_option("--out-dir", out_dir, "gradcheck.json directory")->capture_default_str();
  gc->add_option("--seed", gc_opts.seed)->capture_default_str();
  gc->add_option("--instances", gc_opts.instances)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsageError;
  }

  try {
    const fs::path out(out_dir);
    fs::create_directories(out);

    if (gen->parsed()) {
      const Dataset data = gen_dataset(gen_spec, gen_images);
      save_dataset(data, out);
      std::printf("wrote %zu images to %s\n", data.size(), out.string().c_str());
      return 0;
    }

    if (tr->parsed()) {
      finish_model(run.model, train_flags);
      run.scene.image_size = run.model.image_size;
      Splits splits;
      if (train_data.empty() || val_data.empty()) splits = make_splits(run);
      if (!train_data.empty()) splits.train = load_dataset(train_data);
      if (!val_data.empty()) splits.val = load_dataset(val_data);
      write_text(out / "config.json", config_to_json(run.model));
      std::ofstream log(out / "metrics.jsonl");
      const TrainResult res = train(run, splits.train, splits.val, [&](const MetricsRow& row) {
        log << metrics_to_json(row) << '\n' << std::flush;
        std::printf("epoch %d  lr %.2e  train %.4f  val %.4f  AP %.4f  AP50 %.4f  AP75 %.4f  %.1fs\n", row.epoch,
                    row.lr, row.train_loss, row.val_loss, row.ap, row.ap50, row.ap75, row.wall_seconds);
        std::fflush(stdout);
      });
      log.close();
      Model model = res.model;
      save_checkpoint(model, out / "checkpoint.bin");
      export_curves(out / "metrics.jsonl", out / "metrics.csv");
      return 0;
    }

    if (ev->parsed()) {
      const Model model = load_checkpoint(checkpoint);
      eval_spec.image_size = model.cfg.image_size;
      const Dataset data = eval_data.empty() ? gen_dataset(eval_spec, eval_images) : load_dataset(eval_data);
      const EvalResult r = evaluate(model, data, eval_max_det);
      nlohmann::ordered_json j = ap_json(r.ap);
      j["loss"] = r.loss.total;
      j["loss_cls"] = r.loss.cls;
      j["loss_l1"] = r.loss.l1;
      j["loss_giou"] = r.loss.giou;
      j["images"] = data.size();
      j["macs"] = r.macs;
      write_text(out / "eval.json", j.dump(2));
      std::ofstream dets(out / "detections.jsonl");
      write_records(dets, r.detections, true);
      std::printf("AP %.4f  AP50 %.4f  AP75 %.4f  AP_S %.4f  AP_M %.4f  AP_L %.4f\n", r.ap.ap, r.ap.ap50, r.ap.ap75,
                  r.ap.ap_small, r.ap.ap_medium, r.ap.ap_large);
      return 0;
    }

    if (be->parsed()) {
      finish_model(bench_model, bench_flags);
      const BenchReport r = benchmark(bench_model, sizes, bench_seed);
      write_text(out / "bench.json", bench_to_json(r));
      std::printf("dense exponent %.3f  deformable exponent %.3f  decoder spread %.4f\n", r.exponent_dense,
                  r.exponent_deform, r.decoder_spread);
      return 0;
    }

    if (gc->parsed()) {
      const GradCheckReport r = run_gradcheck_suite(gc_opts);
      nlohmann::ordered_json j;
      j["seed"] = gc_opts.seed;
      j["instances"] = gc_opts.instances;
      j["step"] = gc_opts.step;
      j["tolerance"] = gc_opts.tolerance;
      j["abs_floor"] = gc_opts.abs_floor;
      j["seconds"] = r.seconds;
      j["passed"] = r.passed();
      for (const auto& e : r.entries) {
        j["checks"].push_back({{"name", e.name},
                               {"instances", e.instances},
                               {"n_checked", e.n_checked},
                               {"max_abs_err", e.max_abs_err},
                               {"max_rel_err", e.max_rel_err},
                               {"passed", e.passed}});
        std::printf("%-52s %5d  rel %.2e  %s\n", e.name.c_str(), e.n_checked, e.max_rel_err,
                    e.passed ? "ok" : "FAIL");
      }
      write_text(out / "gradcheck.json", j.dump(2));
      std::printf("%s in %.1fs\n", r.passed() ? "all checks passed" : "gradient check FAILED", r.seconds);
      return r.passed() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsageError;
}
