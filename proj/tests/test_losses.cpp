#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "enjoint/losses.hpp"
#include "support.hpp"

using namespace enjoint;
using testing_support::random_tensor;

namespace {

// Standalone CIoU, written from the textbook definition.
double ciou_oracle(const Box& p, const Box& g) {
  const double inter_w = std::max(0.0, std::min(p.x2, g.x2) - std::max(p.x1, g.x1));
  const double inter_h = std::max(0.0, std::min(p.y2, g.y2) - std::max(p.y1, g.y1));
  const double inter = inter_w * inter_h;
  const double iou = inter / (p.area() + g.area() - inter);
  const double ex = std::max(p.x2, g.x2) - std::min(p.x1, g.x1);
  const double ey = std::max(p.y2, g.y2) - std::min(p.y1, g.y1);
  const double dist = std::pow(p.cx() - g.cx(), 2) + std::pow(p.cy() - g.cy(), 2);
  const double v = 4 / (std::numbers::pi * std::numbers::pi) * std::pow(std::atan(g.width() / g.height()) - std::atan(p.width() / p.height()), 2);
  const double alpha = v == 0 ? 0 : v / ((1 - iou) + v);
  return iou - dist / (ex * ex + ey * ey) - alpha * v;
}

double bce(double x, double y) {
  const double p = 1 / (1 + std::exp(-x));
  return -(y * std::log(p) + (1 - y) * std::log(1 - p));
}
double sig(double x) { return 1 / (1 + std::exp(-x)); }

Tensor<double> filled(const Shape& s, double v) { return Tensor<double>(s, v); }

// One detection level, g x g cells.
NetworkConfig one_level(int input, int stride, std::vector<Anchor> anchors, int classes) {
  NetworkConfig c;
  c.input_size = input;
  c.det_strides = {stride};
  c.anchors = {std::move(anchors)};
  c.class_count = classes;
  return c;
}

std::size_t at(const Tensor<double>& g, int n, int ch, int y, int x) {
  return ((static_cast<std::size_t>(n) * g.dim(1) + ch) * g.dim(2) + y) * g.dim(3) + x;
}

}  // namespace

TEST(EnhLoss, Examples) {
  const auto ref = random_tensor<double>({2, 3, 4, 4}, 1, 0, 1);
  EXPECT_EQ(enh_loss(Var<double>::constant(ref), Var<double>::constant(ref)).value().item(), 0.0);
  auto shifted = ref;
  for (auto& v : shifted.data()) v += 0.1;
  EXPECT_NEAR(enh_loss(Var<double>::constant(shifted), Var<double>::constant(ref)).value().item(), 0.1, 1e-12);
  const auto other = random_tensor<double>({2, 3, 4, 4}, 2, 0, 1);
  double acc = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) acc += std::abs(other[i] - ref[i]);
  EXPECT_NEAR(enh_loss(Var<double>::constant(other), Var<double>::constant(ref)).value().item(), acc / ref.size(), 1e-7);
  EXPECT_THROW(enh_loss(Var<double>::constant(ref), Var<double>::constant(Tensor<double>({1, 3, 4, 4}))), ShapeError);
}

TEST(GrayWorld, Examples) {
  EXPECT_NEAR(gray_world_loss(Var<double>::constant(filled({3, 5, 5}, 0.5))).value().item(), 0.0, 1e-15);
  EXPECT_NEAR(gray_world_loss(Var<double>::constant(filled({3, 5, 5}, 1.0))).value().item(), 0.25, 1e-15);
  Tensor<double> t({3, 2, 2});
  const double means[3] = {0.2, 0.5, 0.8};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) t[static_cast<std::size_t>(c * 4 + i)] = means[c] + (i % 2 ? 0.1 : -0.1);
  EXPECT_NEAR(gray_world_loss(Var<double>::constant(t)).value().item(), 0.06, 1e-12);
  EXPECT_THROW(gray_world_loss(Var<double>::constant(filled({2, 5, 5}, 0.5))), ShapeError);
}

TEST(Ciou, Examples) {
  const Box a{0, 0, 2, 2}, b{1, 0, 3, 2};
  EXPECT_NEAR(ciou(a, a), 1.0, 1e-15);
  EXPECT_LT(ciou(Box{0, 0, 1, 1}, Box{50, 50, 52, 51}), 0.0);
  EXPECT_NEAR(ciou(a, b), 1.0 / 3 - 1.0 / 13, 1e-12);
  EXPECT_NEAR(ciou(a, b), ciou_oracle(a, b), 1e-6);
  EXPECT_THROW(ciou(Box{0, 0, 0, 2}, b), std::invalid_argument);
}

TEST(Ciou, MatchesOracleOnRandomBoxes) {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    auto box = [&] {
      const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
      return Box{x, y, x + rng.uniform(0.5, 30), y + rng.uniform(0.5, 30)};
    };
    const Box p = box(), g = box();
    const double v = ciou(p, g);
    EXPECT_NEAR(v, ciou_oracle(p, g), 1e-6);
    EXPECT_GT(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Assign, ExactAnchorAtCellCenter) {
  const NetworkConfig cfg;
  // anchor (18,14) of level 0 centered on cell (y=3, x=5): center (44, 28)
  const Box gt{44 - 9, 28 - 7, 44 + 9, 28 + 7};
  const auto at = assign_targets(std::vector<GroundTruth>{{{gt}, {2}}}, cfg);
  const auto hit = std::find_if(at.positives.begin(), at.positives.end(),
                                [](const Assignment& a) { return a.level == 0 && a.anchor == 1; });
  ASSERT_NE(hit, at.positives.end());
  EXPECT_EQ(hit->cell_x, 5);
  EXPECT_EQ(hit->cell_y, 3);
  EXPECT_EQ(hit->class_id, 2);
  EXPECT_EQ(at.unmatched, 0);
}

TEST(Assign, OversizedBoxIsUnmatched) {
  NetworkConfig cfg = one_level(96, 8, {{10, 10}}, 4);
  const auto at = assign_targets(std::vector<GroundTruth>{{{Box{0, 0, 100, 100}}, {0}}}, cfg);
  EXPECT_TRUE(at.positives.empty());
  EXPECT_EQ(at.unmatched, 1);
}

TEST(Assign, MatchesBruteForceEnumeration) {
  const NetworkConfig cfg;
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<GroundTruth> gts(2);
    for (auto& g : gts) {
      const int n = rng.randint(0, 5);
      for (int i = 0; i < n; ++i) {
        const double w = rng.uniform(3, 80), h = rng.uniform(3, 80);
        const double x = rng.uniform(0, 96 - w), y = rng.uniform(0, 96 - h);
        g.boxes.push_back({x, y, x + w, y + h});
        g.classes.push_back(rng.randint(0, 3));
      }
    }
    std::vector<Assignment> expect;
    int unmatched = 0;
    for (std::size_t n = 0; n < gts.size(); ++n)
      for (std::size_t k = 0; k < gts[n].boxes.size(); ++k) {
        const Box& b = gts[n].boxes[k];
        bool any = false;
        for (std::size_t l = 0; l < cfg.det_strides.size(); ++l) {
          const int s = cfg.det_strides[l], g = 96 / s;
          for (int cy = 0; cy < g; ++cy)
            for (int cx = 0; cx < g; ++cx) {
              if (!(b.cx() >= cx * s && b.cx() < (cx + 1) * s && b.cy() >= cy * s && b.cy() < (cy + 1) * s)) continue;
              for (std::size_t a = 0; a < cfg.anchors[l].size(); ++a) {
                const auto& an = cfg.anchors[l][a];
                const double r = std::max({b.width() / an.w, an.w / b.width(), b.height() / an.h, an.h / b.height()});
                if (r >= 4.0) continue;
                expect.push_back({static_cast<int>(n), static_cast<int>(l), cy, cx, static_cast<int>(a), b, gts[n].classes[k]});
                any = true;
              }
            }
        }
        unmatched += !any;
      }
    std::sort(expect.begin(), expect.end());
    const auto got = assign_targets(gts, cfg);
    EXPECT_EQ(got.positives, expect) << "trial " << trial;
    EXPECT_EQ(got.unmatched, unmatched);
  }
}

TEST(DetLoss, EmptyGroundTruthIsObjectnessOnly) {
  const NetworkConfig cfg;
  std::vector<Var<double>> grids;
  double acc = 0;
  std::size_t cells = 0;
  for (std::size_t l = 0; l < cfg.det_strides.size(); ++l) {
    const int g = 96 / cfg.det_strides[l];
    auto t = random_tensor<double>({2, 3 * 9, g, g}, 10 + l, -3, 3);
    for (int n = 0; n < 2; ++n)
      for (int a = 0; a < 3; ++a)
        for (int y = 0; y < g; ++y)
          for (int x = 0; x < g; ++x, ++cells) acc += bce(t[at(t, n, a * 9 + 4, y, x)], 0);
    grids.push_back(Var<double>::constant(t));
  }
  const auto r = det_loss(grids, std::vector<GroundTruth>(2), cfg);
  EXPECT_EQ(r.positives, 0u);
  EXPECT_EQ(r.cls, 0.0);
  EXPECT_EQ(r.box, 0.0);
  EXPECT_NEAR(r.total.value().item(), acc / cells, 1e-12);
}

TEST(DetLoss, SaturatesOnPerfectPrediction) {
  const auto cfg = one_level(24, 8, {{10, 10}}, 2);
  Tensor<double> g({1, 7, 3, 3}, 0.0);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) g[at(g, 0, 4, y, x)] = -20;
  // tx=ty=tw=th=0 decodes to the anchor centered in the cell
  g[at(g, 0, 4, 1, 1)] = 10;
  g[at(g, 0, 5, 1, 1)] = -20;
  g[at(g, 0, 6, 1, 1)] = 20;
  const std::vector<GroundTruth> gts{{{Box{7, 7, 17, 17}}, {1}}};
  const auto r = det_loss(std::vector{Var<double>::constant(g)}, gts, cfg);
  ASSERT_EQ(r.positives, 1u);
  EXPECT_NEAR(r.obj_targets[0], 1.0, 1e-12);
  EXPECT_LT(r.total.value().item(), 1e-3);
  g[at(g, 0, 4, 1, 1)] = 30;
  EXPECT_LT(det_loss(std::vector{Var<double>::constant(g)}, gts, cfg).total.value().item(), 1e-8);
}

TEST(DetLoss, TwoSlotClosedForm) {
  // one cell, two anchors, two classes
  const auto cfg = one_level(8, 8, {{6, 6}, {4, 8}}, 2);
  Tensor<double> g({1, 14, 1, 1}, std::vector<double>{0.3, -0.2, 0.1, 0.4, 0.5, 1.2, -0.7,   // anchor 0
                                                       -0.4, 0.6, -0.3, 0.2, -1.1, 0.2, 0.9});  // anchor 1
  const Box gt{1.5, 1.0, 6.5, 7.5};
  const auto r = det_loss(std::vector{Var<double>::constant(g)}, std::vector<GroundTruth>{{{gt}, {0}}}, cfg);
  ASSERT_EQ(r.positives, 2u);

  const std::array<Anchor, 2> an{{{6, 6}, {4, 8}}};
  double box = 0, cls = 0, obj = 0;
  for (int a = 0; a < 2; ++a) {
    const double* t = g.ptr() + a * 7;
    const double cx = (2 * sig(t[0]) - 0.5) * 8, cy = (2 * sig(t[1]) - 0.5) * 8;
    const double w = an[a].w * std::pow(2 * sig(t[2]), 2), h = an[a].h * std::pow(2 * sig(t[3]), 2);
    const double c = ciou_oracle(Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, gt);
    box += (1 - c) / 2;
    cls += (bce(t[5], 1) + bce(t[6], 0)) / 4;
    obj += bce(t[4], std::max(0.0, c)) / 2;
  }
  EXPECT_NEAR(r.box, box, 1e-6);
  EXPECT_NEAR(r.cls, cls, 1e-6);
  EXPECT_NEAR(r.obj, obj, 1e-6);
  EXPECT_NEAR(r.total.value().item(), box + cls + obj, 1e-6);
}

TEST(DetLoss, GroundTruthOrderDoesNotMatter) {
  const NetworkConfig cfg;
  std::vector<Tensor<double>> raw;
  for (int s : cfg.det_strides) raw.push_back(random_tensor<double>({1, 27, 96 / s, 96 / s}, 20 + s, -2, 2));
  const GroundTruth a{{Box{5, 5, 20, 25}, Box{40, 30, 70, 60}, Box{60, 10, 80, 22}}, {0, 3, 1}};
  const GroundTruth b{{a.boxes[2], a.boxes[0], a.boxes[1]}, {1, 0, 3}};
  auto run = [&](const GroundTruth& gt) {
    std::vector<Var<double>> v;
    for (const auto& t : raw) v.push_back(Var<double>::leaf(t, true));
    auto r = det_loss(v, std::vector<GroundTruth>{gt}, cfg);
    backward(r.total);
    std::vector<Tensor<double>> grads;
    for (auto& x : v) grads.push_back(x.grad());
    return std::make_pair(r.total.value().item(), grads);
  };
  const auto ra = run(a), rb = run(b);
  EXPECT_EQ(ra.first, rb.first);
  EXPECT_EQ(ra.second, rb.second);
}

TEST(DetLoss, RejectsMismatchedGrids) {
  const NetworkConfig cfg;
  std::vector<Var<double>> v{Var<double>::constant(Tensor<double>({1, 27, 12, 12}))};
  EXPECT_THROW(det_loss(v, std::vector<GroundTruth>(1), cfg), ShapeError);
  v.push_back(Var<double>::constant(Tensor<double>({1, 27, 5, 5})));
  EXPECT_THROW(det_loss(v, std::vector<GroundTruth>(1), cfg), ShapeError);
}

TEST(DaLoss, Examples) {
  const auto e = random_tensor<double>({4, 3}, 30);
  EXPECT_EQ(da_loss(Var<double>::constant(e), Var<double>::constant(e)).value().item(), 0.0);
  Tensor<double> real({2, 1}, std::vector<double>{0, 2});
  Tensor<double> enh({2, 1}, 0.0);
  EXPECT_NEAR(da_loss(Var<double>::constant(real), Var<double>::constant(enh)).value().item(), 6.0, 1e-12);
  EXPECT_THROW(da_loss(Var<double>::constant(Tensor<double>({1, 3})), Var<double>::constant(Tensor<double>({1, 3}))), ShapeError);
  EXPECT_THROW(da_loss(Var<double>::constant(Tensor<double>({2, 3})), Var<double>::constant(Tensor<double>({2, 4}))), ShapeError);
}

TEST(DaLoss, MatchesNaiveOracle) {
  const auto a = random_tensor<double>({8, 16}, 31), b = random_tensor<double>({8, 16}, 32);
  auto cov = [](const Tensor<double>& x, int i, int j) {
    double mi = 0, mj = 0;
    for (int r = 0; r < 8; ++r) {
      mi += x[static_cast<std::size_t>(r * 16 + i)] / 8;
      mj += x[static_cast<std::size_t>(r * 16 + j)] / 8;
    }
    double s = 0;
    for (int r = 0; r < 8; ++r) s += (x[static_cast<std::size_t>(r * 16 + i)] - mi) * (x[static_cast<std::size_t>(r * 16 + j)] - mj);
    return s / 7;
  };
  double mse = 0, fro = 0;
  for (std::size_t k = 0; k < a.size(); ++k) mse += (a[k] - b[k]) * (a[k] - b[k]) / a.size();
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) fro += std::pow(cov(a, i, j) - cov(b, i, j), 2);
  EXPECT_NEAR(da_loss(Var<double>::constant(a), Var<double>::constant(b)).value().item(), mse + fro, 1e-5);
}

TEST(DaLoss, NoGradientReachesEnhancedEmbedding) {
  auto real = Var<double>::leaf(random_tensor<double>({8, 16}, 33), true);
  auto enh = Var<double>::leaf(random_tensor<double>({8, 16}, 34), true);
  const auto l1 = da_loss(real, enh);
  backward(l1);
  EXPECT_TRUE(!enh.has_grad() || std::all_of(enh.grad().data().begin(), enh.grad().data().end(), [](double v) { return v == 0; }));
  // the value does depend on E_enh
  auto moved = random_tensor<double>({8, 16}, 35);
  EXPECT_NE(da_loss(real, Var<double>::constant(moved)).value().item(), l1.value().item());
  // finite differences w.r.t. E_enh see a change, reverse mode reports none
  bool nonzero_real = false;
  for (double v : real.grad().data()) nonzero_real |= v != 0;
  EXPECT_TRUE(nonzero_real);
}

TEST(LossReport, TotalIsSumOfPresentTerms) {
  LossReport r;
  r.enh = 0.5;
  r.det_r = 1.25;
  r.da = 0.125;
  EXPECT_DOUBLE_EQ(r.sum_present(), 1.875);
  EXPECT_FALSE(r.uns);
}
