#include <gtest/gtest.h>

#include "enjoint/augment.hpp"
#include "support.hpp"

using namespace enjoint;

namespace {

LabeledSample scene(std::uint64_t seed, int size = 48) {
  SceneConfig cfg;
  cfg.image_size = size;
  cfg.min_object_size = 8;
  cfg.max_object_size = 16;
  return render_scene(cfg, seed);
}

LabeledSample flat(int size, float r, float g, float b, const Box& box, int cls) {
  LabeledSample s;
  s.image = Image(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      s.image.at(0, y, x) = r;
      s.image.at(1, y, x) = g;
      s.image.at(2, y, x) = b;
    }
  s.boxes = {box};
  s.classes = {cls};
  return s;
}

void expect_boxes_valid(const LabeledSample& s) {
  ASSERT_EQ(s.boxes.size(), s.classes.size());
  for (const Box& b : s.boxes) {
    EXPECT_TRUE(0 <= b.x1 && b.x2 <= s.image.width());
    EXPECT_TRUE(0 <= b.y1 && b.y2 <= s.image.height());
    EXPECT_GE(b.width(), 2.0);
    EXPECT_GE(b.height(), 2.0);
  }
  for (float v : s.image.data()) ASSERT_TRUE(v >= 0 && v <= 1);
}

}  // namespace

TEST(WeakAugment, DeterministicPerSeed) {
  const auto s = scene(1);
  const auto a = weak_augment(s, 7);
  const auto b = weak_augment(s, 7);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.boxes, b.boxes);
  EXPECT_FALSE(weak_augment(s, 8).image == a.image);
}

TEST(WeakAugment, DoubleFlipIsIdentity) {
  const auto s = scene(2);
  const auto twice = detail::flip_sample(detail::flip_sample(s));
  EXPECT_EQ(twice.image, s.image);
  EXPECT_EQ(twice.boxes, s.boxes);
  EXPECT_EQ(twice.classes, s.classes);
}

TEST(WeakAugment, FullWindowFlipMirrorsBoxes) {
  const auto s = scene(3);
  WeakAugmentOptions opt;
  opt.flip_prob = 1;
  opt.min_crop_area = 1;
  const auto out = weak_augment(s, 11, opt);
  const Image mirrored = hflip(s.image);
  for (std::size_t i = 0; i < mirrored.data().size(); ++i) ASSERT_NEAR(out.image.data()[i], mirrored.data()[i], 1e-6);
  ASSERT_EQ(out.boxes.size(), s.boxes.size());
  const double W = s.image.width();
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    EXPECT_NEAR(out.boxes[i].x1, W - s.boxes[i].x2, 1e-9);
    EXPECT_NEAR(out.boxes[i].x2, W - s.boxes[i].x1, 1e-9);
    EXPECT_NEAR(out.boxes[i].y1, s.boxes[i].y1, 1e-9);
  }
}

TEST(WeakAugment, BoxesStayValidOverManySamples) {
  std::vector<LabeledSample> pool;
  for (std::uint64_t i = 0; i < 50; ++i) pool.push_back(scene(i));
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto& s = pool[seed % 50];
    const auto out = weak_augment(s, seed);
    expect_boxes_valid(out);
    EXPECT_FALSE(out.boxes.empty()) << "seed " << seed;
    EXPECT_EQ(out.image.height(), s.image.height());
  }
}

TEST(WeakAugment, PairsShareGeometry) {
  PairedSample p;
  p.clear = scene(4).image;
  p.degraded = p.clear;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto out = weak_augment(p, seed);
    EXPECT_EQ(out.clear, out.degraded);
  }
  p.degraded = Image(10, 10);
  EXPECT_THROW(weak_augment(p, 1), ShapeError);
}

TEST(StrongAugment, FixedCenterMosaicPlacesQuadrants) {
  const int S = 32;
  const Box box{8, 8, 24, 24};
  const LabeledSample a = flat(S, 1, 0, 0, box, 0), b = flat(S, 0, 1, 0, box, 1), c = flat(S, 0, 0, 1, box, 2),
                      d = flat(S, 1, 1, 0, box, 3);
  StrongAugmentOptions opt;
  opt.random_center = false;
  opt.jitter = opt.blur = opt.flip = opt.crop = false;
  const auto out = strong_augment({&a, &b, &c, &d}, 5, opt);
  const std::array<std::array<float, 3>, 4> colors{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}}};
  const std::array<std::array<int, 2>, 4> origin{{{0, 0}, {16, 0}, {0, 16}, {16, 16}}};
  for (std::size_t q = 0; q < 4; ++q)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int ch = 0; ch < 3; ++ch)
          ASSERT_FLOAT_EQ(out.image.at(ch, origin[q][1] + y, origin[q][0] + x), colors[q][static_cast<std::size_t>(ch)]);
  ASSERT_EQ(out.boxes.size(), 4u);
  for (std::size_t q = 0; q < 4; ++q) {
    const double ox = origin[q][0], oy = origin[q][1];
    EXPECT_EQ(out.boxes[q], (Box{ox + 4, oy + 4, ox + 12, oy + 12}));
    EXPECT_EQ(out.classes[q], static_cast<int>(q));
  }
}

TEST(StrongAugment, BoxesStayValidOverManySamples) {
  std::vector<LabeledSample> pool;
  for (std::uint64_t i = 0; i < 12; ++i) pool.push_back(scene(100 + i));
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const std::array<const LabeledSample*, 4> src{&pool[seed % 12], &pool[(seed + 3) % 12], &pool[(seed + 5) % 12],
                                                  &pool[(seed + 7) % 12]};
    const auto out = strong_augment(src, seed);
    expect_boxes_valid(out);
    for (int cls : out.classes) {
      EXPECT_GE(cls, 0);
      EXPECT_LT(cls, 4);
    }
  }
}

TEST(StrongAugment, DeterministicAndRejectsMixedSizes) {
  const auto a = scene(1), b = scene(2), c = scene(3), d = scene(4);
  const auto x = strong_augment({&a, &b, &c, &d}, 9);
  const auto y = strong_augment({&a, &b, &c, &d}, 9);
  EXPECT_EQ(x.image, y.image);
  EXPECT_EQ(x.boxes, y.boxes);
  const auto small = scene(5, 32);
  EXPECT_THROW(strong_augment({&a, &b, &c, &small}, 1), ShapeError);
}

TEST(ColorJitter, IdentityFactorsAndGrayPixels) {
  Image im = scene(6).image;
  Image same = im;
  color_jitter(same, 1, 1);
  for (std::size_t i = 0; i < im.data().size(); ++i) EXPECT_NEAR(same.data()[i], im.data()[i], 1e-6);
  Image gray(2, 2, 0.4f);
  color_jitter(gray, 1.5, 0);
  for (float v : gray.data()) EXPECT_NEAR(v, 0.6, 1e-6);
}
