#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "enjoint/image.hpp"
#include "enjoint/parallel.hpp"
#include "enjoint/rng.hpp"

namespace enjoint {

enum class WaterType { Clear, Greenish, Bluish, Turbid };

inline std::string to_string(WaterType w) {
  switch (w) {
    case WaterType::Clear: return "clear";
    case WaterType::Greenish: return "greenish";
    case WaterType::Bluish: return "bluish";
    case WaterType::Turbid: return "turbid";
  }
  return "?";
}

inline WaterType water_type_from_string(const std::string& s) {
  if (s == "clear") return WaterType::Clear;
  if (s == "greenish") return WaterType::Greenish;
  if (s == "bluish") return WaterType::Bluish;
  if (s == "turbid") return WaterType::Turbid;
  throw std::invalid_argument("unknown water type: " + s);
}

struct SceneConfig {
  int image_size = 96;
  int min_objects = 1;
  int max_objects = 4;
  int class_count = 4;
  int min_object_size = 12;
  int max_object_size = 30;

  void validate() const {
    if (min_objects < 0 || min_objects > max_objects) throw std::invalid_argument("scene: need 0 <= min_objects <= max_objects");
    if (min_object_size < 4) throw std::invalid_argument("scene: min_object_size must be >= 4");
    if (max_object_size < min_object_size) throw std::invalid_argument("scene: max_object_size < min_object_size");
    if (class_count < 1) throw std::invalid_argument("scene: class_count must be >= 1");
    if (image_size < 8) throw std::invalid_argument("scene: image_size too small");
  }
};

/// Attenuation/backscatter parameters: I = J*t + B*(1-t), t = exp(-beta*depth).
struct DegradationParams {
  std::array<double, 3> beta{0, 0, 0};
  std::array<double, 3> background{0, 0, 0};
  double depth = 0.0;
  double haze_sigma = 0.0;

  void validate() const {
    for (int c = 0; c < 3; ++c) {
      if (beta[c] < 0) throw std::invalid_argument("degradation: beta must be >= 0");
      if (background[c] < 0 || background[c] > 1) throw std::invalid_argument("degradation: background must be in [0,1]");
    }
    if (depth < 0) throw std::invalid_argument("degradation: depth must be >= 0");
    if (haze_sigma < 0) throw std::invalid_argument("degradation: haze_sigma must be >= 0");
  }
};

/// Water-type preset: coefficients plus the depth interval sampled per image.
struct WaterPreset {
  DegradationParams params;
  double depth_min = 0.5;
  double depth_max = 2.0;
};

inline WaterPreset default_preset(WaterType w) {
  WaterPreset p;
  switch (w) {
    case WaterType::Clear:
      p.depth_min = p.depth_max = 0.0;
      break;
    case WaterType::Greenish:
      p.params.beta = {0.8, 0.2, 0.6};
      p.params.background = {0.25, 0.55, 0.35};
      break;
    case WaterType::Bluish:
      p.params.beta = {1.2, 0.6, 0.15};
      p.params.background = {0.10, 0.30, 0.60};
      break;
    case WaterType::Turbid:
      p.params.beta = {0.5, 0.5, 0.5};
      p.params.background = {0.45, 0.45, 0.40};
      p.params.haze_sigma = 1.5;
      break;
  }
  return p;
}

struct LabeledSample {
  Image image;
  std::vector<Box> boxes;
  std::vector<int> classes;
};

struct PairedSample {
  Image degraded;
  Image clear;
};

// ---------------------------------------------------------------------------
// Scene rendering

namespace detail {

struct ShapeSpec {
  int cls = 0;
  double cx = 0, cy = 0;
  double radius = 0;   // outer radius / semi-major axis
  double aspect = 1;   // ellipse only
  double angle = 0;
  std::array<double, 2> phase{0, 0};  // blob harmonics
  std::array<float, 3> color{};
};

inline bool shape_contains(const ShapeSpec& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  const double ca = std::cos(s.angle), sa = std::sin(s.angle);
  const double u = ca * dx + sa * dy;
  const double v = -sa * dx + ca * dy;
  const double r = std::hypot(u, v);
  const double th = std::atan2(v, u);
  switch (s.cls % 4) {
    case 0:  // disc
      return r <= s.radius;
    case 1: {  // five-pointed star
      constexpr double kInner = 0.45;
      const double sector = 2 * std::numbers::pi / 5;
      double a = std::fmod(th + 2 * std::numbers::pi, sector) / sector;  // [0,1) within a point
      const double t = std::abs(a - 0.5) * 2;  // 1 at tips, 0 between tips
      const double edge = s.radius * (kInner + (1 - kInner) * t);
      return r <= edge;
    }
    case 2: {  // ellipse
      const double b = s.radius / s.aspect;
      return (u * u) / (s.radius * s.radius) + (v * v) / (b * b) <= 1.0;
    }
    default: {  // irregular blob
      const double edge = s.radius * (0.8 + 0.2 * std::sin(3 * th + s.phase[0]) + 0.12 * std::sin(5 * th + s.phase[1]));
      return r <= edge;
    }
  }
}

inline std::array<float, 3> class_color(int cls, int class_count) {
  static constexpr std::array<std::array<float, 3>, 4> kBase{{
      {0.85f, 0.15f, 0.15f},  // disc: red
      {0.95f, 0.60f, 0.10f},  // star: orange
      {0.92f, 0.92f, 0.82f},  // ellipse: cream
      {0.50f, 0.20f, 0.65f},  // blob: purple
  }};
  auto c = kBase[static_cast<std::size_t>(cls % 4)];
  if (class_count > 4 && cls >= 4) {
    // Rotate channels for classes beyond the four canonical ones.
    const int rot = (cls / 4) % 3;
    std::array<float, 3> r{};
    for (int i = 0; i < 3; ++i) r[static_cast<std::size_t>(i)] = c[static_cast<std::size_t>((i + rot) % 3)];
    c = r;
  }
  return c;
}

/// Smooth value noise in [0,1]: bilinear interpolation over a random lattice.
inline std::vector<float> value_noise(int size, int cell, Rng& rng) {
  const int n = size / cell + 2;
  std::vector<double> lattice(static_cast<std::size_t>(n) * n);
  for (double& v : lattice) v = rng.uniform();
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const int iy = static_cast<int>(fy);
    double ty = fy - iy;
    ty = ty * ty * (3 - 2 * ty);
    for (int x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const int ix = static_cast<int>(fx);
      double tx = fx - ix;
      tx = tx * tx * (3 - 2 * tx);
      auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(a) * n + b]; };
      const double top = L(iy, ix) * (1 - tx) + L(iy, ix + 1) * tx;
      const double bot = L(iy + 1, ix) * (1 - tx) + L(iy + 1, ix + 1) * tx;
      out[static_cast<std::size_t>(y) * size + x] = static_cast<float>(top * (1 - ty) + bot * ty);
    }
  }
  return out;
}

}  // namespace detail

/// Renders a clear-water scene of distinct shapes (one canonical shape per
/// class) on a textured seabed. Deterministic in (cfg, seed).
inline LabeledSample render_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int S = cfg.image_size;
  if (cfg.min_objects > 0 && cfg.min_object_size > S) {
    throw std::invalid_argument("render_scene: image too small for min_object_size");
  }
  Rng rng(seed);
  LabeledSample out;
  out.image = Image(S, S);

  // Seabed: sandy base tinted per scene, two octaves of smooth noise.
  const std::array<double, 3> base{0.70 + rng.uniform(-0.08, 0.08), 0.64 + rng.uniform(-0.08, 0.08),
                                   0.50 + rng.uniform(-0.08, 0.08)};
  const auto coarse = detail::value_noise(S, std::max(4, S / 4), rng);
  const auto fine = detail::value_noise(S, std::max(2, S / 12), rng);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * S + x;
      const double shade = 0.75 + 0.35 * coarse[i] + 0.12 * (fine[i] - 0.5);
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = static_cast<float>(std::clamp(base[static_cast<std::size_t>(c)] * shade, 0.0, 1.0));
    }

  const int count = rng.randint(cfg.min_objects, cfg.max_objects);
  constexpr int kMaxTries = 200;
  constexpr int kGap = 2;
  constexpr int kSuper = 3;  // supersampling per axis
  std::vector<Box> placed;
  for (int k = 0; k < count; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < kMaxTries && !ok; ++attempt) {
      detail::ShapeSpec s;
      s.cls = rng.randint(0, cfg.class_count - 1);
      const double size = rng.uniform(cfg.min_object_size, cfg.max_object_size + 1.0);
      s.radius = size / 2.0;
      s.aspect = rng.uniform(1.6, 2.2);
      s.angle = rng.uniform(0, std::numbers::pi);
      s.phase = {rng.uniform(0, 2 * std::numbers::pi), rng.uniform(0, 2 * std::numbers::pi)};
      s.cx = rng.uniform(s.radius, S - s.radius);
      s.cy = rng.uniform(s.radius, S - s.radius);
      const auto col = detail::class_color(s.cls, cfg.class_count);
      const double tint = rng.uniform(-0.05, 0.05);
      for (int c = 0; c < 3; ++c) s.color[static_cast<std::size_t>(c)] = static_cast<float>(std::clamp(col[static_cast<std::size_t>(c)] + tint, 0.0, 1.0));

      // Coverage raster over the bounding square.
      const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.radius)) - 1);
      const int x1 = std::min(S, static_cast<int>(std::ceil(s.cx + s.radius)) + 1);
      const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.radius)) - 1);
      const int y1 = std::min(S, static_cast<int>(std::ceil(s.cy + s.radius)) + 1);
      std::vector<float> cov(static_cast<std::size_t>(x1 - x0) * (y1 - y0), 0.0f);
      int bx1 = S, by1 = S, bx2 = -1, by2 = -1;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          int hits = 0;
          for (int sy = 0; sy < kSuper; ++sy)
            for (int sx = 0; sx < kSuper; ++sx)
              hits += detail::shape_contains(s, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper);
          const float a = static_cast<float>(hits) / (kSuper * kSuper);
          cov[static_cast<std::size_t>(y - y0) * (x1 - x0) + (x - x0)] = a;
          if (a >= 0.5f) {
            bx1 = std::min(bx1, x);
            by1 = std::min(by1, y);
            bx2 = std::max(bx2, x);
            by2 = std::max(by2, y);
          }
        }
      if (bx2 < 0) continue;
      const Box box{static_cast<double>(bx1), static_cast<double>(by1), static_cast<double>(bx2 + 1), static_cast<double>(by2 + 1)};
      if (box.width() < cfg.min_object_size || box.height() < cfg.min_object_size) continue;
      bool clash = false;
      for (const Box& o : placed) {
        if (box.x1 < o.x2 + kGap && o.x1 < box.x2 + kGap && box.y1 < o.y2 + kGap && o.y1 < box.y2 + kGap) {
          clash = true;
          break;
        }
      }
      if (clash) continue;

      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const float a = cov[static_cast<std::size_t>(y - y0) * (x1 - x0) + (x - x0)];
          if (a <= 0) continue;
          const double r = std::hypot(x + 0.5 - s.cx, y + 0.5 - s.cy) / s.radius;
          const double shade = 1.0 - 0.25 * std::clamp(r, 0.0, 1.0);
          for (int c = 0; c < 3; ++c) {
            float& px = out.image.at(c, y, x);
            px = (1 - a) * px + a * static_cast<float>(s.color[static_cast<std::size_t>(c)] * shade);
          }
        }
      placed.push_back(box);
      out.boxes.push_back(box);
      out.classes.push_back(s.cls);
      ok = true;
    }
    if (!ok) {
      if (k < cfg.min_objects) throw std::invalid_argument("render_scene: cannot place the minimum number of objects");
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image formation

inline Image degrade(const Image& clear, const DegradationParams& p) {
  p.validate();
  Image out(clear.height(), clear.width());
  for (int c = 0; c < 3; ++c) {
    const double t = std::exp(-p.beta[static_cast<std::size_t>(c)] * p.depth);
    const double veil = p.background[static_cast<std::size_t>(c)] * (1 - t);
    const std::size_t off = c * clear.plane();
    for (std::size_t i = 0; i < clear.plane(); ++i) {
      out.data()[off + i] = static_cast<float>(clear.data()[off + i] * t + veil);
    }
  }
  if (p.haze_sigma > 0) out = gaussian_blur(out, p.haze_sigma);
  clamp01(out);
  return out;
}

/// Algebraic inverse of the attenuation model (no blur). Rejects
/// ill-conditioned transmissions t <= 1e-6.
inline Image invert_degrade(const Image& degraded, const DegradationParams& p) {
  p.validate();
  if (p.haze_sigma > 0) throw std::invalid_argument("invert_degrade: blur is not invertible (haze_sigma must be 0)");
  Image out(degraded.height(), degraded.width());
  for (int c = 0; c < 3; ++c) {
    const double t = std::exp(-p.beta[static_cast<std::size_t>(c)] * p.depth);
    if (t <= 1e-6) throw std::invalid_argument("invert_degrade: transmission too small");
    const double veil = p.background[static_cast<std::size_t>(c)] * (1 - t);
    const std::size_t off = c * degraded.plane();
    for (std::size_t i = 0; i < degraded.plane(); ++i) {
      out.data()[off + i] = static_cast<float>((degraded.data()[off + i] - veil) / t);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset assembly

struct EvalSample {
  LabeledSample sample;  // degraded image + labels
  Image clear;
};

struct EvalSplit {
  std::string name;
  WaterType water = WaterType::Clear;
  std::vector<EvalSample> samples;
};

struct DatasetSizes {
  int paired = 512;
  int labeled = 512;
  int eval_per_type = 128;
};

struct DatasetConfig {
  SceneConfig scene;
  DatasetSizes sizes;
  std::array<WaterPreset, 4> presets{default_preset(WaterType::Clear), default_preset(WaterType::Greenish),
                                     default_preset(WaterType::Bluish), default_preset(WaterType::Turbid)};
  WaterType home = WaterType::Greenish;
  double home_depth_min = 0.5;
  double home_depth_max = 1.0;
  std::uint64_t seed = 1;
  // Start of each split's index range in the per-sample seed stream; unset
  // means contiguous packing in the order paired, labeled, eval.
  std::optional<std::array<std::uint64_t, 3>> seed_offsets;

  const WaterPreset& preset(WaterType w) const { return presets[static_cast<std::size_t>(w)]; }

  /// Eval splits: the home distribution plus each non-clear water type.
  std::vector<std::pair<std::string, WaterType>> eval_split_names() const {
    return {{"home", home}, {"greenish", WaterType::Greenish}, {"bluish", WaterType::Bluish}, {"turbid", WaterType::Turbid}};
  }

  std::array<std::uint64_t, 3> offsets() const {
    if (seed_offsets) return *seed_offsets;
    const auto p = static_cast<std::uint64_t>(sizes.paired);
    const auto l = static_cast<std::uint64_t>(sizes.labeled);
    return {0, p, p + l};
  }
};

struct Datasets {
  std::vector<PairedSample> paired;     // D_ps
  std::vector<LabeledSample> labeled;   // D_lr
  std::vector<Image> unpaired;          // D_ur: images of D_lr without labels
  std::vector<EvalSplit> eval;

  const EvalSplit& split(const std::string& name) const {
    for (const auto& s : eval)
      if (s.name == name) return s;
    throw std::out_of_range("no eval split named " + name);
  }

  /// FNV-1a over every pixel and label, in a fixed order.
  std::uint64_t content_hash() const {
    Fnv1a h;
    auto img = [&h](const Image& im) {
      h.update_value(im.height());
      h.update_value(im.width());
      h.update(im.data().data(), im.data().size() * sizeof(float));
    };
    auto lab = [&](const LabeledSample& s) {
      img(s.image);
      h.update_value(s.boxes.size());
      for (std::size_t i = 0; i < s.boxes.size(); ++i) {
        h.update_value(s.boxes[i].x1);
        h.update_value(s.boxes[i].y1);
        h.update_value(s.boxes[i].x2);
        h.update_value(s.boxes[i].y2);
        h.update_value(s.classes[i]);
      }
    };
    for (const auto& p : paired) {
      img(p.degraded);
      img(p.clear);
    }
    for (const auto& s : labeled) lab(s);
    for (const auto& im : unpaired) img(im);
    for (const auto& split : eval) {
      h.update(split.name.data(), split.name.size());
      for (const auto& e : split.samples) {
        lab(e.sample);
        img(e.clear);
      }
    }
    return h.digest();
  }
};

inline DegradationParams sample_degradation(const WaterPreset& preset, double depth_min, double depth_max, Rng& rng) {
  DegradationParams p = preset.params;
  p.depth = depth_min == depth_max ? depth_min : rng.uniform(depth_min, depth_max);
  return p;
}

/// Builds D_ps, D_lr, D_ur and the per-water-type eval splits. Every sample
/// draws its own seed from a disjoint index range, so splits never share scenes.
inline Datasets build_datasets(const DatasetConfig& cfg) {
  cfg.scene.validate();
  if (cfg.sizes.paired < 1 || cfg.sizes.labeled < 1 || cfg.sizes.eval_per_type < 1) {
    throw std::invalid_argument("build_datasets: sizes must be >= 1");
  }
  const auto off = cfg.offsets();
  const std::array<std::uint64_t, 3> len{static_cast<std::uint64_t>(cfg.sizes.paired),
                                         static_cast<std::uint64_t>(cfg.sizes.labeled),
                                         static_cast<std::uint64_t>(cfg.sizes.eval_per_type) * 4};
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b)
      if (off[a] < off[b] + len[b] && off[b] < off[a] + len[a]) {
        throw std::invalid_argument("build_datasets: overlapping seed ranges");
      }

  auto sample_seed = [&cfg](std::uint64_t index) { return derive_seed(cfg.seed, 0, index); };
  const std::array<WaterType, 3> mixed{WaterType::Greenish, WaterType::Bluish, WaterType::Turbid};

  Datasets ds;
  ds.paired.resize(static_cast<std::size_t>(cfg.sizes.paired));
  parallel_for(ds.paired.size(), [&](std::size_t i) {
    const std::uint64_t s = sample_seed(off[0] + i);
    LabeledSample scene = render_scene(cfg.scene, s);
    Rng rng(splitmix64(s));
    const WaterType w = mixed[static_cast<std::size_t>(rng.randint(0, 2))];
    const auto& pr = cfg.preset(w);
    Image deg = degrade(scene.image, sample_degradation(pr, pr.depth_min, pr.depth_max, rng));
    quantize8(deg);
    quantize8(scene.image);
    ds.paired[i] = {std::move(deg), std::move(scene.image)};
  });

  ds.labeled.resize(static_cast<std::size_t>(cfg.sizes.labeled));
  parallel_for(ds.labeled.size(), [&](std::size_t i) {
    const std::uint64_t s = sample_seed(off[1] + i);
    LabeledSample scene = render_scene(cfg.scene, s);
    Rng rng(splitmix64(s));
    scene.image = degrade(scene.image, sample_degradation(cfg.preset(cfg.home), cfg.home_depth_min, cfg.home_depth_max, rng));
    quantize8(scene.image);
    ds.labeled[i] = std::move(scene);
  });
  ds.unpaired.reserve(ds.labeled.size());
  for (const auto& s : ds.labeled) ds.unpaired.push_back(s.image);

  std::uint64_t next = off[2];
  for (const auto& [name, water] : cfg.eval_split_names()) {
    EvalSplit split;
    split.name = name;
    split.water = water;
    split.samples.resize(static_cast<std::size_t>(cfg.sizes.eval_per_type));
    const bool home = name == "home";
    const std::uint64_t base = next;
    parallel_for(split.samples.size(), [&](std::size_t i) {
      const std::uint64_t s = sample_seed(base + i);
      LabeledSample scene = render_scene(cfg.scene, s);
      Rng rng(splitmix64(s));
      const auto& pr = cfg.preset(water);
      const double dmin = home ? cfg.home_depth_min : pr.depth_min;
      const double dmax = home ? cfg.home_depth_max : pr.depth_max;
      EvalSample e;
      e.clear = scene.image;
      quantize8(e.clear);
      e.sample.image = degrade(scene.image, sample_degradation(pr, dmin, dmax, rng));
      quantize8(e.sample.image);
      e.sample.boxes = std::move(scene.boxes);
      e.sample.classes = std::move(scene.classes);
      split.samples[i] = std::move(e);
    });
    next += static_cast<std::uint64_t>(cfg.sizes.eval_per_type);
    ds.eval.push_back(std::move(split));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// JSON (de)serialization of configs

inline nlohmann::json to_json(const SceneConfig& s) {
  return {{"image_size", s.image_size},   {"min_objects", s.min_objects},         {"max_objects", s.max_objects},
          {"class_count", s.class_count}, {"min_object_size", s.min_object_size}, {"max_object_size", s.max_object_size}};
}

inline SceneConfig scene_from_json(const nlohmann::json& j) {
  SceneConfig s;
  s.image_size = j.value("image_size", s.image_size);
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.class_count = j.value("class_count", s.class_count);
  s.min_object_size = j.value("min_object_size", s.min_object_size);
  s.max_object_size = j.value("max_object_size", s.max_object_size);
  s.validate();
  return s;
}

inline nlohmann::json to_json(const WaterPreset& p) {
  return {{"beta", p.params.beta},   {"background", p.params.background}, {"haze_sigma", p.params.haze_sigma},
          {"depth_min", p.depth_min}, {"depth_max", p.depth_max}};
}

inline WaterPreset preset_from_json(const nlohmann::json& j, WaterPreset p) {
  if (j.contains("beta")) p.params.beta = j.at("beta").get<std::array<double, 3>>();
  if (j.contains("background")) p.params.background = j.at("background").get<std::array<double, 3>>();
  p.params.haze_sigma = j.value("haze_sigma", p.params.haze_sigma);
  p.depth_min = j.value("depth_min", p.depth_min);
  p.depth_max = j.value("depth_max", p.depth_max);
  p.params.validate();
  return p;
}

inline nlohmann::json to_json(const DatasetConfig& c) {
  nlohmann::json presets;
  for (WaterType w : {WaterType::Greenish, WaterType::Bluish, WaterType::Turbid}) presets[to_string(w)] = to_json(c.preset(w));
  nlohmann::json j{{"scene", to_json(c.scene)},
                   {"sizes", {{"paired", c.sizes.paired}, {"labeled", c.sizes.labeled}, {"eval_per_type", c.sizes.eval_per_type}}},
                   {"presets", presets},
                   {"home", {{"water", to_string(c.home)}, {"depth_min", c.home_depth_min}, {"depth_max", c.home_depth_max}}},
                   {"seed", c.seed}};
  if (c.seed_offsets) j["seed_offsets"] = *c.seed_offsets;
  return j;
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  if (j.contains("scene")) c.scene = scene_from_json(j.at("scene"));
  if (j.contains("sizes")) {
    const auto& s = j.at("sizes");
    c.sizes.paired = s.value("paired", c.sizes.paired);
    c.sizes.labeled = s.value("labeled", c.sizes.labeled);
    c.sizes.eval_per_type = s.value("eval_per_type", c.sizes.eval_per_type);
  }
  if (j.contains("presets")) {
    for (const auto& [name, pj] : j.at("presets").items()) {
      const WaterType w = water_type_from_string(name);
      c.presets[static_cast<std::size_t>(w)] = preset_from_json(pj, c.preset(w));
    }
  }
  if (j.contains("home")) {
    const auto& h = j.at("home");
    c.home = water_type_from_string(h.value("water", to_string(c.home)));
    c.home_depth_min = h.value("depth_min", c.home_depth_min);
    c.home_depth_max = h.value("depth_max", c.home_depth_max);
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("seed_offsets")) c.seed_offsets = j.at("seed_offsets").get<std::array<std::uint64_t, 3>>();
  return c;
}

// ---------------------------------------------------------------------------
// Directory export / import

namespace detail {

inline std::string index_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i << ".ppm";
  return os.str();
}

inline void write_labels(const std::filesystem::path& path, const std::vector<LabeledSample>& samples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "index,x1,y1,x2,y2,class\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t k = 0; k < samples[i].boxes.size(); ++k) {
      const Box& b = samples[i].boxes[k];
      os << i << ',' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ',' << samples[i].classes[k] << '\n';
    }
}

inline void read_labels(const std::filesystem::path& path, std::vector<LabeledSample>& samples) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& s : f) std::getline(ss, s, ',');
    const auto idx = std::stoull(f[0]);
    if (idx >= samples.size()) throw std::runtime_error(path.string() + ": label index out of range");
    samples[idx].boxes.push_back({std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    samples[idx].classes.push_back(std::stoi(f[5]));
  }
}

}  // namespace detail

/// Writes one directory per split (binary PPM images, CSV labels) and a JSON
/// manifest carrying the config, presets, seed and content hash.
inline void export_datasets(const Datasets& ds, const DatasetConfig& cfg, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  fs::create_directories(root / "paired" / "degraded");
  fs::create_directories(root / "paired" / "clear");
  for (std::size_t i = 0; i < ds.paired.size(); ++i) {
    write_ppm(root / "paired" / "degraded" / detail::index_name(i), ds.paired[i].degraded);
    write_ppm(root / "paired" / "clear" / detail::index_name(i), ds.paired[i].clear);
  }
  fs::create_directories(root / "labeled" / "images");
  for (std::size_t i = 0; i < ds.labeled.size(); ++i) write_ppm(root / "labeled" / "images" / detail::index_name(i), ds.labeled[i].image);
  detail::write_labels(root / "labeled" / "labels.csv", ds.labeled);
  fs::create_directories(root / "unpaired");
  for (std::size_t i = 0; i < ds.unpaired.size(); ++i) write_ppm(root / "unpaired" / detail::index_name(i), ds.unpaired[i]);
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& split : ds.eval) {
    const fs::path dir = root / ("eval_" + split.name);
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "clear");
    std::vector<LabeledSample> labels;
    for (std::size_t i = 0; i < split.samples.size(); ++i) {
      write_ppm(dir / "images" / detail::index_name(i), split.samples[i].sample.image);
      write_ppm(dir / "clear" / detail::index_name(i), split.samples[i].clear);
      labels.push_back(split.samples[i].sample);
    }
    detail::write_labels(dir / "labels.csv", labels);
    splits.push_back({{"name", split.name}, {"water", to_string(split.water)}, {"count", split.samples.size()}});
  }
  nlohmann::json manifest{{"config", to_json(cfg)},
                          {"seed", cfg.seed},
                          {"counts", {{"paired", ds.paired.size()}, {"labeled", ds.labeled.size()}, {"unpaired", ds.unpaired.size()}}},
                          {"eval_splits", splits},
                          {"content_hash", hash_hex(ds.content_hash())}};
  std::ofstream os(root / "manifest.json");
  os << manifest.dump(2) << '\n';
}

struct LoadedDatasets {
  Datasets data;
  DatasetConfig config;
  std::string manifest_hash;
};

/// Reads a directory written by export_datasets; the recomputed content hash
/// must match the manifest.
inline LoadedDatasets load_datasets(const std::filesystem::path& root) {
  std::ifstream is(root / "manifest.json");
  if (!is) throw std::runtime_error("missing dataset manifest in " + root.string());
  const auto manifest = nlohmann::json::parse(is);
  LoadedDatasets out;
  out.config = dataset_config_from_json(manifest.at("config"));
  out.manifest_hash = manifest.at("content_hash").get<std::string>();
  const auto& counts = manifest.at("counts");
  Datasets& ds = out.data;
  ds.paired.resize(counts.at("paired").get<std::size_t>());
  for (std::size_t i = 0; i < ds.paired.size(); ++i) {
    ds.paired[i].degraded = read_ppm(root / "paired" / "degraded" / detail::index_name(i));
    ds.paired[i].clear = read_ppm(root / "paired" / "clear" / detail::index_name(i));
  }
  ds.labeled.resize(counts.at("labeled").get<std::size_t>());
  for (std::size_t i = 0; i < ds.labeled.size(); ++i) ds.labeled[i].image = read_ppm(root / "labeled" / "images" / detail::index_name(i));
  detail::read_labels(root / "labeled" / "labels.csv", ds.labeled);
  const auto n_unpaired = counts.at("unpaired").get<std::size_t>();
  for (std::size_t i = 0; i < n_unpaired; ++i) ds.unpaired.push_back(read_ppm(root / "unpaired" / detail::index_name(i)));
  for (const auto& sj : manifest.at("eval_splits")) {
    EvalSplit split;
    split.name = sj.at("name").get<std::string>();
    split.water = water_type_from_string(sj.at("water").get<std::string>());
    const auto dir = root / ("eval_" + split.name);
    std::vector<LabeledSample> labels(sj.at("count").get<std::size_t>());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i].image = read_ppm(dir / "images" / detail::index_name(i));
    detail::read_labels(dir / "labels.csv", labels);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      EvalSample e;
      e.sample = std::move(labels[i]);
      e.clear = read_ppm(dir / "clear" / detail::index_name(i));
      split.samples.push_back(std::move(e));
    }
    ds.eval.push_back(std::move(split));
  }
  if (hash_hex(ds.content_hash()) != out.manifest_hash) {
    throw std::runtime_error("dataset content hash mismatch in " + root.string());
  }
  return out;
}

}  // namespace enjoint
