#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "enjoint/aquasynth.hpp"
#include "enjoint/image.hpp"
#include "enjoint/rng.hpp"

namespace enjoint {

/// Crop window in source pixels.
struct CropWindow {
  double x0 = 0, y0 = 0, w = 0, h = 0;
};

namespace detail {

// Boxes narrower or shorter than this after remapping are dropped.
inline constexpr double kMinBoxSide = 2.0;
inline constexpr int kCropTries = 10;

inline CropWindow sample_crop(Rng& rng, int height, int width, double min_area) {
  const double sx = rng.uniform(min_area, 1.0);
  const double sy = rng.uniform(min_area / sx, 1.0);
  CropWindow c;
  c.w = sx * width;
  c.h = sy * height;
  c.x0 = rng.uniform(0.0, width - c.w);
  c.y0 = rng.uniform(0.0, height - c.h);
  return c;
}

// Maps boxes through x' = (x - x0) * sx + ox, clips to [0,W]x[0,H], drops slivers.
inline void remap_boxes(const std::vector<Box>& boxes, const std::vector<int>& classes, double x0, double y0, double sx,
                        double sy, double ox, double oy, double W, double H, std::vector<Box>& out_boxes,
                        std::vector<int>& out_classes) {
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    Box r{std::clamp((b.x1 - x0) * sx + ox, 0.0, W), std::clamp((b.y1 - y0) * sy + oy, 0.0, H),
          std::clamp((b.x2 - x0) * sx + ox, 0.0, W), std::clamp((b.y2 - y0) * sy + oy, 0.0, H)};
    if (r.width() < kMinBoxSide || r.height() < kMinBoxSide) continue;
    out_boxes.push_back(r);
    out_classes.push_back(classes[i]);
  }
}

inline LabeledSample flip_sample(const LabeledSample& s) {
  LabeledSample out;
  out.image = hflip(s.image);
  out.classes = s.classes;
  const double W = s.image.width();
  for (const Box& b : s.boxes) out.boxes.push_back({W - b.x2, b.y1, W - b.x1, b.y2});
  return out;
}

inline LabeledSample crop_sample(const LabeledSample& s, const CropWindow& c) {
  LabeledSample out;
  const int H = s.image.height(), W = s.image.width();
  out.image = resample(s.image, c.x0, c.y0, c.w, c.h, H, W);
  remap_boxes(s.boxes, s.classes, c.x0, c.y0, W / c.w, H / c.h, 0, 0, W, H, out.boxes, out.classes);
  return out;
}

// Crop with retries: a labeled sample must keep at least one box, else after
// kCropTries failed draws the sample is left uncropped.
inline LabeledSample random_crop(const LabeledSample& s, Rng& rng, double min_area) {
  for (int t = 0; t < kCropTries; ++t) {
    const CropWindow c = sample_crop(rng, s.image.height(), s.image.width(), min_area);
    LabeledSample out = crop_sample(s, c);
    if (s.boxes.empty() || !out.boxes.empty()) return out;
  }
  return s;
}

}  // namespace detail

struct WeakAugmentOptions {
  double flip_prob = 0.5;
  double min_crop_area = 0.8;
};

/// Horizontal flip with probability 0.5, then a random crop covering at least
/// 80% of the area resized back to the input size. Boxes follow the geometry.
inline LabeledSample weak_augment(const LabeledSample& s, std::uint64_t seed, const WeakAugmentOptions& opt = {}) {
  Rng rng(seed);
  LabeledSample out = rng.bernoulli(opt.flip_prob) ? detail::flip_sample(s) : s;
  return detail::random_crop(out, rng, opt.min_crop_area);
}

/// Same geometry applied to both images of a pair.
inline PairedSample weak_augment(const PairedSample& p, std::uint64_t seed, const WeakAugmentOptions& opt = {}) {
  if (!p.degraded.same_size(p.clear)) throw ShapeError("weak_augment: pair images differ in size");
  Rng rng(seed);
  PairedSample out = p;
  if (rng.bernoulli(opt.flip_prob)) {
    out.degraded = hflip(out.degraded);
    out.clear = hflip(out.clear);
  }
  const int H = p.clear.height(), W = p.clear.width();
  const CropWindow c = detail::sample_crop(rng, H, W, opt.min_crop_area);
  out.degraded = resample(out.degraded, c.x0, c.y0, c.w, c.h, H, W);
  out.clear = resample(out.clear, c.x0, c.y0, c.w, c.h, H, W);
  return out;
}

struct StrongAugmentOptions {
  bool random_center = true;  // false: split exactly at the canvas center
  double center_lo = 0.3, center_hi = 0.7;
  bool jitter = true;
  double brightness = 0.2, saturation = 0.2;
  bool blur = true;
  double blur_prob = 0.3;
  double blur_sigma_lo = 0.5, blur_sigma_hi = 1.5;
  bool flip = true;
  bool crop = true;
  double min_crop_area = 0.8;
};

/// Brightness and saturation scaled by factors in [1-b, 1+b] and [1-s, 1+s].
inline void color_jitter(Image& im, double brightness, double saturation) {
  const std::size_t P = im.plane();
  float* d = im.data().data();
  for (std::size_t i = 0; i < P; ++i) {
    const double gray = (d[i] + d[P + i] + d[2 * P + i]) / 3.0;
    for (int c = 0; c < 3; ++c) {
      float& v = d[c * P + i];
      v = static_cast<float>(brightness * (gray + saturation * (v - gray)));
    }
  }
  clamp01(im);
}

/// 2x2 mosaic of four samples on a canvas of the input size, each quadrant a
/// rescaled copy of one sample, followed by color jitter, blur, flip and crop.
/// All boxes may be clipped away, which leaves a valid negative image.
inline LabeledSample strong_augment(const std::array<const LabeledSample*, 4>& src, std::uint64_t seed,
                                    const StrongAugmentOptions& opt = {}) {
  const int H = src[0]->image.height(), W = src[0]->image.width();
  for (const auto* s : src)
    if (s->image.height() != H || s->image.width() != W) throw ShapeError("strong_augment: samples differ in size");
  Rng rng(seed);
  int cx = W / 2, cy = H / 2;
  if (opt.random_center) {
    cx = static_cast<int>(std::lround(rng.uniform(opt.center_lo, opt.center_hi) * W));
    cy = static_cast<int>(std::lround(rng.uniform(opt.center_lo, opt.center_hi) * H));
  }
  cx = std::clamp(cx, 1, W - 1);
  cy = std::clamp(cy, 1, H - 1);

  LabeledSample out;
  out.image = Image(H, W);
  const std::array<std::array<int, 4>, 4> quads{{{0, 0, cx, cy}, {cx, 0, W - cx, cy}, {0, cy, cx, H - cy}, {cx, cy, W - cx, H - cy}}};
  for (std::size_t q = 0; q < 4; ++q) {
    const auto [qx, qy, qw, qh] = quads[q];
    const Image tile = resize(src[q]->image, qh, qw);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < qh; ++y)
        for (int x = 0; x < qw; ++x) out.image.at(c, qy + y, qx + x) = tile.at(c, y, x);
    detail::remap_boxes(src[q]->boxes, src[q]->classes, 0, 0, static_cast<double>(qw) / W, static_cast<double>(qh) / H, qx,
                        qy, qx + qw, qy + qh, out.boxes, out.classes);
  }

  if (opt.jitter) {
    const double b = rng.uniform(1 - opt.brightness, 1 + opt.brightness);
    const double s = rng.uniform(1 - opt.saturation, 1 + opt.saturation);
    color_jitter(out.image, b, s);
  }
  if (opt.blur && rng.bernoulli(opt.blur_prob)) {
    out.image = gaussian_blur(out.image, rng.uniform(opt.blur_sigma_lo, opt.blur_sigma_hi));
  }
  if (opt.flip && rng.bernoulli(0.5)) out = detail::flip_sample(out);
  if (opt.crop) out = detail::crop_sample(out, detail::sample_crop(rng, H, W, opt.min_crop_area));
  return out;
}

}  // namespace enjoint
