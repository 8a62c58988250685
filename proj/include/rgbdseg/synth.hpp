#pragma once

// Deterministic synthetic RGB-D scenes. Layered rectangles and ellipses sit
// on a small set of disparity planes over a background plane; color carries
// class identity except for one designated class pair that shares a color
// distribution and is separable only by its disparity plane. Disparity gets
// multiplicative speckle noise and dropout (dropped pixels read 0 = invalid).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rgbdseg/errors.hpp"
#include "rgbdseg/netpbm.hpp"
#include "rgbdseg/rng.hpp"

namespace rgbdseg {

struct RgbdSample {
  int h = 0, w = 0;
  std::vector<double> rgb;        // h*w*3 interleaved, values on the 1/255 grid
  std::vector<double> disparity;  // h*w raw integer-valued disparity, 0 = invalid
  std::vector<int> labels;        // h*w class ids

  void validate() const {
    const std::size_t n = static_cast<std::size_t>(h) * w;
    if (h < 1 || w < 1 || rgb.size() != 3 * n || disparity.size() != n || labels.size() != n)
      throw std::invalid_argument("RgbdSample: inconsistent buffers");
  }
};

struct SceneSpec {
  std::uint64_t seed = 7;
  int height = 64;
  int width = 64;
  int num_classes = 4;
  int objects_min = 3;
  int objects_max = 6;
  int depth_planes = 4;
  bool color_ambiguity = true;
  double disp_noise = 0.05;    // multiplicative speckle stddev
  double disp_dropout = 0.02;  // probability a pixel reads invalid

  // The ambiguous pair: the two highest class ids, pinned to the two nearest
  // planes so depth resolves what color cannot.
  int ambiguous_a() const { return num_classes - 2; }
  int ambiguous_b() const { return num_classes - 1; }
  int plane_a() const { return depth_planes - 2; }
  int plane_b() const { return depth_planes - 1; }

  double plane_disparity(int plane) const {
    return std::floor((plane + 1) * 48000.0 / (depth_planes + 1));
  }

  void validate() const {
    if (height < 8 || width < 8 || height > 4096 || width > 4096)
      throw std::invalid_argument("SceneSpec: extent must be within [8, 4096]");
    if (num_classes < 2 || num_classes > 256)
      throw std::invalid_argument("SceneSpec: num_classes must be in [2, 256]");
    if (objects_min < 1 || objects_max < objects_min)
      throw std::invalid_argument("SceneSpec: bad object count range");
    if (depth_planes < 2 || depth_planes > 16)
      throw std::invalid_argument("SceneSpec: depth_planes must be in [2, 16]");
    if (disp_noise < 0.0 || disp_noise > 0.2)
      throw std::invalid_argument("SceneSpec: disp_noise must be in [0, 0.2]");
    if (disp_dropout < 0.0 || disp_dropout >= 0.5)
      throw std::invalid_argument("SceneSpec: disp_dropout must be in [0, 0.5)");
    if (color_ambiguity) {
      if (num_classes < 3)
        throw std::invalid_argument("SceneSpec: color ambiguity needs at least 3 classes");
      // Planes outside the ambiguous pair's need a non-ambiguous foreground class.
      if (depth_planes > 3 && num_classes < 4)
        throw std::invalid_argument(
            "SceneSpec: ambiguity with more than 3 planes needs a 4th class");
    }
  }
};

// Per-class base colors; fixed for a given generator seed so every sample of
// a dataset shares one color distribution. The ambiguous pair shares a color.
inline std::vector<std::array<double, 3>> class_colors(const SceneSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0xC0102ull));
  std::vector<std::array<double, 3>> colors(static_cast<std::size_t>(spec.num_classes));
  for (auto& c : colors)
    for (double& ch : c) ch = rng.uniform(0.15, 0.85);
  if (spec.color_ambiguity)
    colors[static_cast<std::size_t>(spec.ambiguous_b())] =
        colors[static_cast<std::size_t>(spec.ambiguous_a())];
  return colors;
}

namespace detail {

struct SceneObject {
  int cls = 0;
  int plane = 0;
  bool ellipse = false;
  double cx = 0, cy = 0, rx = 0, ry = 0;

  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx;
    const double dy = (y - cy) / ry;
    if (ellipse) return dx * dx + dy * dy <= 1.0;
    return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
  }
};

}  // namespace detail

inline RgbdSample generate(const SceneSpec& spec, std::int64_t index) {
  spec.validate();
  if (index < 0) throw std::invalid_argument("generate: index must be non-negative");
  const auto colors = class_colors(spec);
  const int h = spec.height, w = spec.width;
  const int planes = spec.depth_planes;
  const int k = spec.num_classes;
  const bool amb = spec.color_ambiguity;
  const std::uint64_t sample_seed = derive_seed(spec.seed, static_cast<std::uint64_t>(index));
  constexpr double texture_noise = 0.05;

  for (int attempt = 0; attempt < 200; ++attempt) {
    Rng rng(derive_seed(sample_seed, static_cast<std::uint64_t>(attempt)));

    auto random_geometry = [&](detail::SceneObject& o) {
      o.ellipse = rng.bernoulli(0.5);
      o.cx = rng.uniform(0.1, 0.9) * w;
      o.cy = rng.uniform(0.1, 0.9) * h;
      o.rx = rng.uniform(0.09, 0.22) * w;
      o.ry = rng.uniform(0.09, 0.22) * h;
    };
    auto filler_class = [&]() {
      // A class that is not the ambiguous pair (used off the pair's planes).
      return amb ? static_cast<int>(rng.uniform_int(1, k - 3))
                 : static_cast<int>(rng.uniform_int(1, k - 1));
    };

    std::vector<detail::SceneObject> objs;
    // One object per non-background plane keeps every plane visible; the
    // ambiguous classes claim their pinned planes.
    for (int p = 1; p < planes; ++p) {
      detail::SceneObject o;
      o.plane = p;
      if (amb && p == spec.plane_a())
        o.cls = spec.ambiguous_a();
      else if (amb && p == spec.plane_b())
        o.cls = spec.ambiguous_b();
      else
        o.cls = filler_class();
      random_geometry(o);
      objs.push_back(o);
    }
    if (amb && spec.plane_a() == 0) {
      // Two-plane layout: class A lives on the background plane.
      detail::SceneObject o;
      o.plane = 0;
      o.cls = spec.ambiguous_a();
      random_geometry(o);
      objs.push_back(o);
    }
    const int target =
        static_cast<int>(rng.uniform_int(spec.objects_min, spec.objects_max));
    while (static_cast<int>(objs.size()) < target) {
      detail::SceneObject o;
      o.cls = static_cast<int>(rng.uniform_int(1, k - 1));
      if (amb && o.cls == spec.ambiguous_a())
        o.plane = spec.plane_a();
      else if (amb && o.cls == spec.ambiguous_b())
        o.plane = spec.plane_b();
      else
        o.plane = static_cast<int>(rng.uniform_int(1, planes - 1));
      random_geometry(o);
      objs.push_back(o);
    }
    std::stable_sort(objs.begin(), objs.end(),
                     [](const auto& a, const auto& b) { return a.plane < b.plane; });

    // Rasterize far to near.
    std::vector<int> label(static_cast<std::size_t>(h) * w, 0);
    std::vector<int> plane_idx(label.size(), 0);
    for (const auto& o : objs) {
      const int y0 = std::max(0, static_cast<int>(std::floor(o.cy - o.ry)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(o.cy + o.ry)));
      const int x0 = std::max(0, static_cast<int>(std::floor(o.cx - o.rx)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(o.cx + o.rx)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          if (o.contains(x + 0.5, y + 0.5)) {
            label[static_cast<std::size_t>(y) * w + x] = o.cls;
            plane_idx[static_cast<std::size_t>(y) * w + x] = o.plane;
          }
    }

    // Composition checks; a failed attempt re-rolls with a derived stream.
    std::vector<std::int64_t> class_px(static_cast<std::size_t>(k), 0);
    std::vector<std::int64_t> plane_px(static_cast<std::size_t>(planes), 0);
    for (std::size_t i = 0; i < label.size(); ++i) {
      ++class_px[static_cast<std::size_t>(label[i])];
      ++plane_px[static_cast<std::size_t>(plane_idx[i])];
    }
    const int classes_present =
        static_cast<int>(std::count_if(class_px.begin(), class_px.end(),
                                       [](std::int64_t c) { return c > 0; }));
    bool ok = classes_present >= 2;
    for (std::int64_t c : plane_px) ok = ok && c > 0;
    if (amb)
      ok = ok && class_px[static_cast<std::size_t>(spec.ambiguous_a())] >= 16 &&
           class_px[static_cast<std::size_t>(spec.ambiguous_b())] >= 16;
    if (!ok) continue;

    RgbdSample s;
    s.h = h;
    s.w = w;
    s.labels = std::move(label);
    s.rgb.resize(static_cast<std::size_t>(h) * w * 3);
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      const auto& base = colors[static_cast<std::size_t>(s.labels[i])];
      for (int ch = 0; ch < 3; ++ch) {
        const double v =
            std::clamp(base[static_cast<std::size_t>(ch)] + rng.normal(0.0, texture_noise), 0.0, 1.0);
        s.rgb[3 * i + static_cast<std::size_t>(ch)] = std::round(v * 255.0) / 255.0;
      }
    }
    s.disparity.resize(s.labels.size());
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      double d = spec.plane_disparity(plane_idx[i]);
      if (spec.disp_noise > 0.0) d *= 1.0 + rng.normal(0.0, spec.disp_noise);
      if (spec.disp_dropout > 0.0 && rng.bernoulli(spec.disp_dropout)) {
        s.disparity[i] = 0.0;
      } else {
        s.disparity[i] = std::clamp(std::round(d), 1.0, 65535.0);
      }
    }
    return s;
  }
  throw std::invalid_argument("generate: spec never produced a valid composition");
}

// ---------------------------------------------------------------------------
// Dataset on disk: <root>/<split>/<index>_{rgb.ppm, disp.pgm, label.pgm}

namespace detail {

inline std::filesystem::path sample_path(const std::filesystem::path& root,
                                         const std::string& split, std::int64_t index,
                                         const char* kind) {
  return root / split / (std::to_string(index) + "_" + kind);
}

}  // namespace detail

inline void write_sample(const std::filesystem::path& root, const std::string& split,
                         std::int64_t index, const RgbdSample& s) {
  s.validate();
  std::filesystem::create_directories(root / split);
  PpmImage rgb;
  rgb.h = s.h;
  rgb.w = s.w;
  rgb.pix.resize(s.rgb.size());
  for (std::size_t i = 0; i < s.rgb.size(); ++i)
    rgb.pix[i] = static_cast<std::uint8_t>(std::lround(s.rgb[i] * 255.0));
  write_ppm(detail::sample_path(root, split, index, "rgb.ppm"), rgb);

  PgmImage disp;
  disp.h = s.h;
  disp.w = s.w;
  disp.maxval = 65535;
  disp.pix.resize(s.disparity.size());
  for (std::size_t i = 0; i < s.disparity.size(); ++i) {
    const double d = s.disparity[i];
    if (d < 0.0 || d > 65535.0 || d != std::round(d))
      throw std::invalid_argument("write_sample: disparity must be integral in [0, 65535]");
    disp.pix[i] = static_cast<std::uint16_t>(d);
  }
  write_pgm(detail::sample_path(root, split, index, "disp.pgm"), disp);

  PgmImage lab;
  lab.h = s.h;
  lab.w = s.w;
  lab.maxval = 255;
  lab.pix.resize(s.labels.size());
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    if (s.labels[i] < 0 || s.labels[i] > 255)
      throw std::invalid_argument("write_sample: label outside 8-bit range");
    lab.pix[i] = static_cast<std::uint16_t>(s.labels[i]);
  }
  write_pgm(detail::sample_path(root, split, index, "label.pgm"), lab);
}

inline RgbdSample load_sample(const std::filesystem::path& root, const std::string& split,
                              std::int64_t index) {
  const PpmImage rgb = read_ppm(detail::sample_path(root, split, index, "rgb.ppm"));
  const PgmImage disp = read_pgm(detail::sample_path(root, split, index, "disp.pgm"));
  const PgmImage lab = read_pgm(detail::sample_path(root, split, index, "label.pgm"));
  if (disp.h != rgb.h || disp.w != rgb.w || lab.h != rgb.h || lab.w != rgb.w)
    throw IoError("sample " + std::to_string(index) + " in " + (root / split).string() +
                  " has mismatched image extents");
  RgbdSample s;
  s.h = rgb.h;
  s.w = rgb.w;
  s.rgb.resize(rgb.pix.size());
  for (std::size_t i = 0; i < rgb.pix.size(); ++i) s.rgb[i] = rgb.pix[i] / 255.0;
  s.disparity.assign(disp.pix.begin(), disp.pix.end());
  s.labels.assign(lab.pix.begin(), lab.pix.end());
  return s;
}

// Global sample index determines the split: [0, train_count) trains,
// [train_count, train_count + val_count) validates. Files keep the global
// index in their names.
inline void write_dataset(const std::filesystem::path& root, const SceneSpec& spec,
                          std::int64_t train_count, std::int64_t val_count) {
  if (train_count < 1 || val_count < 0)
    throw std::invalid_argument("write_dataset: need at least one training sample");
  for (std::int64_t i = 0; i < train_count; ++i) write_sample(root, "train", i, generate(spec, i));
  for (std::int64_t j = 0; j < val_count; ++j)
    write_sample(root, "val", train_count + j, generate(spec, train_count + j));
}

// Loads every sample of a split, ordered by index.
inline std::vector<RgbdSample> load_split(const std::filesystem::path& root,
                                          const std::string& split) {
  const auto dir = root / split;
  if (!std::filesystem::is_directory(dir)) throw IoError("missing dataset split: " + dir.string());
  std::vector<std::int64_t> indices;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    const auto sep = name.find("_rgb.ppm");
    if (sep == std::string::npos || sep == 0) continue;
    try {
      indices.push_back(std::stoll(name.substr(0, sep)));
    } catch (const std::exception&) {
      throw IoError("unparseable sample file name: " + entry.path().string());
    }
  }
  if (indices.empty()) throw IoError("empty dataset split: " + dir.string());
  std::sort(indices.begin(), indices.end());
  std::vector<RgbdSample> out;
  out.reserve(indices.size());
  for (std::int64_t i : indices) out.push_back(load_sample(root, split, i));
  return out;
}

}  // namespace rgbdseg
