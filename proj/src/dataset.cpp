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

#include "ddetr/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ddetr/evaluation.hpp"

namespace ddetr {

namespace {

constexpr std::array<std::array<double, 3>, kNumShapeClasses> kBaseColor = {{
    {0.85, 0.25, 0.25},
    {0.25, 0.80, 0.30},
    {0.30, 0.35, 0.90},
}};

constexpr int kMaxPlacementTries = 200;
constexpr char kFormat[] = "ddetr-dataset";
constexpr int kVersion = 1;

struct Rect {
  int x0, y0, w, h;
  bool overlaps(const Rect& o, int gap) const {
    return x0 < o.x0 + o.w + gap && o.x0 < x0 + w + gap && y0 < o.y0 + o.h + gap && o.y0 < y0 + h + gap;
  }
};

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

nlohmann::ordered_json spec_json(const SceneSpec& s) {
  nlohmann::ordered_json j;
  j["image_size"] = s.image_size;
  j["min_objects"] = s.min_objects;
  j["max_objects"] = s.max_objects;
  j["min_size"] = s.min_size;
  j["max_size"] = s.max_size;
  j["noise"] = s.noise;
  j["color_jitter"] = s.color_jitter;
  j["seed"] = s.seed;
  return j;
}

}  // namespace

void SceneSpec::validate() const {
  if (image_size < 8) throw std::invalid_argument("scene spec: image too small");
  if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("scene spec: bad object count range");
  if (min_size < 3 || max_size < min_size) throw std::invalid_argument("scene spec: bad object size range");
  if (max_size > image_size) throw std::invalid_argument("scene spec: objects larger than the image cannot fit");
  if (noise < 0.0 || color_jitter < 0.0) throw std::invalid_argument("scene spec: negative noise");
}

bool shape_covers(ShapeClass shape, int x0, int y0, int w, int h, int px, int py) {
  const double u = (px + 0.5 - x0) / w;  // [0, 1] across the box
  const double v = (py + 0.5 - y0) / h;
  if (u < 0.0 || u > 1.0 || v < 0.0 || v > 1.0) return false;
  switch (shape) {
    case ShapeClass::Rectangle:
      return true;
    case ShapeClass::Ellipse: {
      const double a = 2.0 * u - 1.0;
      const double b = 2.0 * v - 1.0;
      return a * a + b * b <= 1.0;
    }
    case ShapeClass::Triangle:
      // Apex at top center, base along the bottom edge.
      return std::abs(u - 0.5) <= 0.5 * v;
  }
  return false;
}

FeatureMap Sample::image(int size) const {
  if (pixels.size() != static_cast<std::size_t>(3) * size * size) {
    throw std::invalid_argument("sample: pixel buffer does not match image size");
  }
  FeatureMap m(3, size, size);
  for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data.data()[i] = pixels[static_cast<std::size_t>(i)] / 255.0;
  return m;
}

Dataset gen_dataset(const SceneSpec& spec, int n_images) {
  spec.validate();
  if (n_images < 0) throw std::invalid_argument("gen_dataset: negative image count");
  Dataset data;
  data.spec = spec;
  Rng rng(spec.seed);
  std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<int> size_dist(spec.min_size, spec.max_size);
  std::uniform_int_distribution<int> class_dist(0, kNumShapeClasses - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int s = spec.image_size;
  const auto plane = static_cast<std::size_t>(s) * s;

  for (int n = 0; n < n_images; ++n) {
    std::vector<double> img(3 * plane);
    std::array<double, 3> bg{};
    for (auto& c : bg) c = 0.05 + 0.15 * unit(rng);
    for (int c = 0; c < 3; ++c) std::fill_n(img.begin() + c * plane, plane, bg[c]);

    Sample sample;
    std::vector<Rect> placed;
    const int want = count_dist(rng);
    for (int o = 0; o < want; ++o) {
      bool ok = false;
      Rect r{};
      for (int t = 0; t < kMaxPlacementTries && !ok; ++t) {
        r.w = size_dist(rng);
        r.h = size_dist(rng);
        r.x0 = std::uniform_int_distribution<int>(0, s - r.w)(rng);
        r.y0 = std::uniform_int_distribution<int>(0, s - r.h)(rng);
        ok = std::none_of(placed.begin(), placed.end(), [&](const Rect& p) { return p.overlaps(r, 1); });
      }
      if (!ok) {
        // Crowded image: keep fewer objects unless that breaks the minimum.
        if (static_cast<int>(placed.size()) < spec.min_objects) {
          throw std::invalid_argument("gen_dataset: cannot place min_objects without overlap");
        }
        break;
      }
      placed.push_back(r);
      const int cls = class_dist(rng);
      std::array<double, 3> color{};
      for (int c = 0; c < 3; ++c) color[c] = std::clamp(kBaseColor[cls][c] + spec.color_jitter * (2.0 * unit(rng) - 1.0), 0.0, 1.0);

      int mx0 = s, my0 = s, mx1 = -1, my1 = -1;
      for (int y = r.y0; y < r.y0 + r.h; ++y) {
        for (int x = r.x0; x < r.x0 + r.w; ++x) {
          if (!shape_covers(static_cast<ShapeClass>(cls), r.x0, r.y0, r.w, r.h, x, y)) continue;
          for (int c = 0; c < 3; ++c) img[c * plane + static_cast<std::size_t>(y) * s + x] = color[c];
          mx0 = std::min(mx0, x);
          my0 = std::min(my0, y);
          mx1 = std::max(mx1, x);
          my1 = std::max(my1, y);
        }
      }
      const double w = mx1 - mx0 + 1;
      const double h = my1 - my0 + 1;
      sample.labels.push_back({cls, {(mx0 + 0.5 * w) / s, (my0 + 0.5 * h) / s, w / s, h / s}});
    }
    sample.pixels.resize(3 * plane);
    for (std::size_t i = 0; i < img.size(); ++i) {
      const double noise = spec.noise > 0.0 ? spec.noise * gauss(rng) : 0.0;
      sample.pixels[i] = quantize(img[i] + noise);
    }
    data.samples.push_back(std::move(sample));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["count"] = data.samples.size();
  manifest["image_size"] = data.spec.image_size;
  manifest["channels"] = 3;
  manifest["layout"] = "CHW uint8, images concatenated";
  manifest["images"] = "images.bin";
  manifest["labels"] = "labels.jsonl";
  manifest["classes"] = {"rectangle", "ellipse", "triangle"};
  manifest["spec"] = spec_json(data.spec);
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';

  std::ofstream bin(dir / "images.bin", std::ios::binary);
  for (const auto& s : data.samples) {
    bin.write(reinterpret_cast<const char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
  }
  std::ofstream labels(dir / "labels.jsonl");
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    std::vector<DetectionRecord> recs;
    for (const auto& l : data.samples[i].labels) recs.push_back({static_cast<int>(i), l.cls, l.box, 1.0});
    write_records(labels, recs, false);
  }
  if (!bin || !labels) throw std::runtime_error("save_dataset: write failed in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("load_dataset: missing manifest.json in " + dir.string());
  const auto manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kVersion) {
    throw std::runtime_error("load_dataset: unsupported dataset format");
  }
  Dataset data;
  const auto& sj = manifest.at("spec");
  data.spec.image_size = sj.at("image_size");
  data.spec.min_objects = sj.at("min_objects");
  data.spec.max_objects = sj.at("max_objects");
  data.spec.min_size = sj.at("min_size");
  data.spec.max_size = sj.at("max_size");
  data.spec.noise = sj.at("noise");
  data.spec.color_jitter = sj.at("color_jitter");
  data.spec.seed = sj.at("seed");

  const std::size_t count = manifest.at("count");
  const auto plane = static_cast<std::size_t>(3) * data.spec.image_size * data.spec.image_size;
  std::ifstream bin(dir / manifest.at("images").get<std::string>(), std::ios::binary);
  data.samples.resize(count);
  for (auto& s : data.samples) {
    s.pixels.resize(plane);
    bin.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(plane));
    if (!bin) throw std::runtime_error("load_dataset: images.bin is truncated");
  }
  std::ifstream lf(dir / manifest.at("labels").get<std::string>());
  for (const auto& r : read_records(lf)) {
    if (r.image_id < 0 || static_cast<std::size_t>(r.image_id) >= count) {
      throw std::runtime_error("load_dataset: label refers to a missing image");
    }
    data.samples[static_cast<std::size_t>(r.image_id)].labels.push_back({r.cls, r.box});
  }
  return data;
}

}  // namespace ddetr
