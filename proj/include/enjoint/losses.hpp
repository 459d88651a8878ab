#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "enjoint/autograd.hpp"
#include "enjoint/dual.hpp"
#include "enjoint/image.hpp"
#include "enjoint/model.hpp"
#include "enjoint/ops.hpp"

namespace enjoint {

/// Per-step loss components; absent terms were not active at that step.
struct LossReport {
  std::optional<double> enh, det_r, uns, det_e, da;
  double total = 0.0;

  double sum_present() const {
    double s = 0;
    for (const auto& t : {enh, det_r, uns, det_e, da})
      if (t) s += *t;
    return s;
  }
};

/// Mean absolute difference over all pixels and channels.
template <typename T>
Var<T> enh_loss(const Var<T>& pred, const Var<T>& ref) {
  require_same_shape(pred.shape(), ref.shape(), "enh_loss");
  return mean_all(abs(sub(pred, ref)));
}

/// Gray-world deviation: (1/3) * sum_c (mean_c - 0.5)^2, averaged over the batch.
template <typename T>
Var<T> gray_world_loss(const Var<T>& pred) {
  Var<T> x = pred;
  if (x.shape().size() == 3) {
    const Shape& s = x.shape();
    x = make_result<T>(x.value().reshaped({1, s[0], s[1], s[2]}), {pred}, [](Node<T>& self) { self.parents[0]->accumulate(self.grad.data()); });
  }
  if (x.shape().size() != 4 || x.dim(1) != 3) throw ShapeError("gray_world_loss: expected [N,3,H,W]");
  return mean_all(square(add_scalar(global_avg_pool(x), T{-0.5})));
}

/// Box as four scalars of an arbitrary (possibly dual) numeric type.
template <typename S>
struct BoxOf {
  S x1, y1, x2, y2;
};

/// Complete IoU: IoU - rho^2/c^2 - alpha*v. Every term, alpha included, is
/// differentiated. Zero-area boxes are rejected.
template <typename S>
S ciou(const BoxOf<S>& a, const BoxOf<S>& b) {
  using std::atan;
  const S wa = a.x2 - a.x1, ha = a.y2 - a.y1;
  const S wb = b.x2 - b.x1, hb = b.y2 - b.y1;
  for (const S& v : {wa, ha, wb, hb})
    if (!std::isfinite(static_cast<double>(value_of(v)))) throw NumericError("ciou: non-finite box");
  if (!(value_of(wa) > 0 && value_of(ha) > 0 && value_of(wb) > 0 && value_of(hb) > 0)) {
    throw std::invalid_argument("ciou: degenerate box");
  }
  const S zero(0);
  const S iw = dmax(zero, dmin(a.x2, b.x2) - dmax(a.x1, b.x1));
  const S ih = dmax(zero, dmin(a.y2, b.y2) - dmax(a.y1, b.y1));
  const S inter = iw * ih;
  const S uni = wa * ha + wb * hb - inter;
  const S iou = inter / uni;

  const S cw = dmax(a.x2, b.x2) - dmin(a.x1, b.x1);
  const S ch = dmax(a.y2, b.y2) - dmin(a.y1, b.y1);
  const S c2 = cw * cw + ch * ch;
  const S dx = (b.x1 + b.x2 - a.x1 - a.x2) * S(0.5);
  const S dy = (b.y1 + b.y2 - a.y1 - a.y2) * S(0.5);
  const S rho2 = dx * dx + dy * dy;

  const auto k = 4.0 / (std::numbers::pi * std::numbers::pi);
  const S da = atan(wb / hb) - atan(wa / ha);
  const S v = S(k) * da * da;
  // v = 0 (equal aspect ratios) makes the weight 0/0 for identical boxes.
  const S alpha = value_of(v) > 0 ? v / (v - iou + S(1)) : S(0);
  return iou - rho2 / c2 - alpha * v;
}

inline double ciou(const Box& a, const Box& b) {
  return ciou(BoxOf<double>{a.x1, a.y1, a.x2, a.y2}, BoxOf<double>{b.x1, b.y1, b.x2, b.y2});
}

// ---------------------------------------------------------------------------
// Target assignment

inline constexpr double kAnchorRatioGate = 4.0;

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> classes;
};

struct Assignment {
  int image = 0;
  int level = 0;
  int cell_y = 0, cell_x = 0;
  int anchor = 0;
  Box target;
  int class_id = 0;

  auto key() const { return std::tuple(image, level, cell_y, cell_x, anchor, target.x1, target.y1, target.x2, target.y2, class_id); }
  friend bool operator==(const Assignment& a, const Assignment& b) { return a.key() == b.key(); }
  friend bool operator<(const Assignment& a, const Assignment& b) { return a.key() < b.key(); }
};

struct AssignedTargets {
  std::vector<Assignment> positives;  // canonical (sorted) order
  int unmatched = 0;                  // GT boxes with no anchor under the ratio gate
};

/// Center-cell assignment: at every detection stride, each anchor with
/// max(w/aw, aw/w, h/ah, ah/h) < 4 becomes positive at the GT center's cell.
inline AssignedTargets assign_targets(const std::vector<GroundTruth>& gts, const NetworkConfig& cfg) {
  AssignedTargets out;
  for (std::size_t n = 0; n < gts.size(); ++n) {
    const auto& gt = gts[n];
    if (gt.boxes.size() != gt.classes.size()) throw std::invalid_argument("assign_targets: boxes/classes length mismatch");
    for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
      const Box& b = gt.boxes[g];
      bool matched = false;
      for (std::size_t l = 0; l < cfg.det_strides.size(); ++l) {
        const int s = cfg.det_strides[l];
        const int cells = cfg.input_size / s;
        const int gx = std::clamp(static_cast<int>(std::floor(b.cx() / s)), 0, cells - 1);
        const int gy = std::clamp(static_cast<int>(std::floor(b.cy() / s)), 0, cells - 1);
        for (std::size_t a = 0; a < cfg.anchors[l].size(); ++a) {
          const Anchor& an = cfg.anchors[l][a];
          const double rw = b.width() / an.w, rh = b.height() / an.h;
          const double r = std::max({rw, 1.0 / rw, rh, 1.0 / rh});
          if (r < kAnchorRatioGate) {
            out.positives.push_back({static_cast<int>(n), static_cast<int>(l), gy, gx, static_cast<int>(a), b, gt.classes[g]});
            matched = true;
          }
        }
      }
      if (!matched) ++out.unmatched;
    }
  }
  std::sort(out.positives.begin(), out.positives.end());
  return out;
}

// ---------------------------------------------------------------------------
// Detection loss

template <typename T>
T bce_with_logits(T x, T y) {
  return std::max(x, T{0}) - x * y + std::log1p(std::exp(-std::abs(x)));
}

struct DetLossOptions {
  double w_cls = 1.0, w_box = 1.0, w_obj = 1.0;
  // Objectness targets are the clamped CIoU of each positive, held constant
  // during differentiation; true also propagates through them.
  bool obj_target_grad = false;
  // Replaces the computed targets (one per positive, canonical order).
  std::optional<std::vector<double>> fixed_obj_targets;
};

template <typename T>
struct DetLossResult {
  Var<T> total;
  double cls = 0, box = 0, obj = 0;
  std::size_t positives = 0;
  int unmatched = 0;
  std::vector<double> obj_targets;
};

/// YOLO-style detection loss over raw grids:
///   cls: BCE of class logits vs one-hot, mean over positives x classes;
///   box: mean (1 - CIoU) over positives;
///   obj: BCE over every anchor cell of every level, target clamped CIoU at
///        positives and 0 elsewhere, mean over all cells.
template <typename T>
DetLossResult<T> det_loss(const std::vector<Var<T>>& grids, const std::vector<GroundTruth>& gts, const NetworkConfig& cfg,
                          const DetLossOptions& opt = {}) {
  using D = Dual<T, 4>;
  if (grids.size() != cfg.det_strides.size()) throw ShapeError("det_loss: one grid per detection stride expected");
  const int A = cfg.anchors_per_level();
  const int per = cfg.outputs_per_anchor();
  const int K = cfg.class_count;
  const int N = grids.front().dim(0);
  if (static_cast<int>(gts.size()) != N) throw ShapeError("det_loss: ground-truth count differs from batch size");
  std::size_t total_cells = 0;
  for (std::size_t l = 0; l < grids.size(); ++l) {
    const int g = cfg.input_size / cfg.det_strides[l];
    require_same_shape(grids[l].shape(), {N, A * per, g, g}, "det_loss");
    total_cells += static_cast<std::size_t>(N) * A * g * g;
  }

  const AssignedTargets at = assign_targets(gts, cfg);
  DetLossResult<T> res;
  res.positives = at.positives.size();
  res.unmatched = at.unmatched;

  auto index = [&](std::size_t l, int n, int ch, int y, int x) {
    const int g = grids[l].dim(2);
    return ((static_cast<std::size_t>(n) * A * per + ch) * g + y) * g + x;
  };

  std::vector<Tensor<T>> grad(grids.size());
  for (std::size_t l = 0; l < grids.size(); ++l) grad[l] = Tensor<T>(grids[l].shape());

  // Positives: box + class terms, objectness targets.
  const std::size_t P = at.positives.size();
  std::vector<D> ciou_d(P);
  double box_sum = 0, cls_sum = 0;
  for (std::size_t i = 0; i < P; ++i) {
    const Assignment& a = at.positives[i];
    const auto l = static_cast<std::size_t>(a.level);
    const T* raw = grids[l].value().ptr();
    const int s = cfg.det_strides[l];
    const Anchor& an = cfg.anchors[l][static_cast<std::size_t>(a.anchor)];
    const int c0 = a.anchor * per;
    D t[4];
    for (int k = 0; k < 4; ++k) t[k] = D::variable(raw[index(l, a.image, c0 + k, a.cell_y, a.cell_x)], k);
    auto sig = [](const D& z) { return D(1) / (D(1) + exp(-z)); };
    const D px = (D(static_cast<T>(a.cell_x)) + D(2) * sig(t[0]) - D(0.5)) * D(static_cast<T>(s));
    const D py = (D(static_cast<T>(a.cell_y)) + D(2) * sig(t[1]) - D(0.5)) * D(static_cast<T>(s));
    const D sw = D(2) * sig(t[2]), sh = D(2) * sig(t[3]);
    const D pw = D(static_cast<T>(an.w)) * sw * sw, ph = D(static_cast<T>(an.h)) * sh * sh;
    const BoxOf<D> pred{px - pw * D(0.5), py - ph * D(0.5), px + pw * D(0.5), py + ph * D(0.5)};
    const BoxOf<D> tgt{D(static_cast<T>(a.target.x1)), D(static_cast<T>(a.target.y1)), D(static_cast<T>(a.target.x2)),
                       D(static_cast<T>(a.target.y2))};
    ciou_d[i] = ciou(pred, tgt);
    box_sum += static_cast<double>(T{1} - ciou_d[i].v);
    const T box_scale = static_cast<T>(opt.w_box) / static_cast<T>(P);
    for (int k = 0; k < 4; ++k) grad[l][index(l, a.image, c0 + k, a.cell_y, a.cell_x)] -= box_scale * ciou_d[i].d[static_cast<std::size_t>(k)];

    const T cls_scale = static_cast<T>(opt.w_cls) / static_cast<T>(P * static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      const std::size_t idx = index(l, a.image, c0 + 5 + k, a.cell_y, a.cell_x);
      const T x = raw[idx];
      const T y = k == a.class_id ? T{1} : T{0};
      cls_sum += static_cast<double>(bce_with_logits(x, y));
      grad[l][idx] += cls_scale * (sigmoid_scalar(x) - y);
    }
  }

  // Objectness target per positive slot; duplicate slots take the largest.
  if (opt.fixed_obj_targets && opt.fixed_obj_targets->size() != P) {
    throw std::invalid_argument("det_loss: fixed_obj_targets size differs from positive count");
  }
  res.obj_targets.resize(P);
  for (std::size_t i = 0; i < P; ++i) {
    res.obj_targets[i] = opt.fixed_obj_targets ? (*opt.fixed_obj_targets)[i] : std::max(0.0, static_cast<double>(ciou_d[i].v));
  }
  struct Slot {
    std::size_t level, idx;
    std::size_t owner;  // positive whose target wins
  };
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < P; ++i) {
    const Assignment& a = at.positives[i];
    const auto l = static_cast<std::size_t>(a.level);
    const std::size_t idx = index(l, a.image, a.anchor * per + 4, a.cell_y, a.cell_x);
    auto it = std::find_if(slots.begin(), slots.end(), [&](const Slot& s) { return s.level == l && s.idx == idx; });
    if (it == slots.end()) {
      slots.push_back({l, idx, i});
    } else if (res.obj_targets[i] > res.obj_targets[it->owner]) {
      it->owner = i;
    }
  }

  double obj_sum = 0;
  const T obj_scale = static_cast<T>(opt.w_obj) / static_cast<T>(total_cells);
  for (std::size_t l = 0; l < grids.size(); ++l) {
    const T* raw = grids[l].value().ptr();
    const int g = grids[l].dim(2);
    for (int n = 0; n < N; ++n)
      for (int a = 0; a < A; ++a)
        for (int y = 0; y < g; ++y)
          for (int x = 0; x < g; ++x) {
            const std::size_t idx = index(l, n, a * per + 4, y, x);
            obj_sum += static_cast<double>(bce_with_logits(raw[idx], T{0}));
            grad[l][idx] += obj_scale * sigmoid_scalar(raw[idx]);
          }
  }
  for (const Slot& s : slots) {
    const T x = grids[s.level].value()[s.idx];
    const T y = static_cast<T>(res.obj_targets[s.owner]);
    // Replace the zero-target term with the positive target.
    obj_sum += static_cast<double>(bce_with_logits(x, y) - bce_with_logits(x, T{0}));
    grad[s.level][s.idx] -= obj_scale * y;
    if (opt.obj_target_grad && !opt.fixed_obj_targets && ciou_d[s.owner].v > 0) {
      // d BCE / d y = -x, chained through the owning positive's CIoU.
      const Assignment& a = at.positives[s.owner];
      const auto l = static_cast<std::size_t>(a.level);
      for (int k = 0; k < 4; ++k) {
        grad[l][index(l, a.image, a.anchor * per + k, a.cell_y, a.cell_x)] +=
            obj_scale * (-x) * ciou_d[s.owner].d[static_cast<std::size_t>(k)];
      }
    }
  }

  res.cls = P ? cls_sum / static_cast<double>(P * static_cast<std::size_t>(K)) : 0.0;
  res.box = P ? box_sum / static_cast<double>(P) : 0.0;
  res.obj = obj_sum / static_cast<double>(total_cells);
  const double total = opt.w_cls * res.cls + opt.w_box * res.box + opt.w_obj * res.obj;

  res.total = make_result<T>(Tensor<T>::scalar(static_cast<T>(total)), grids, [grad = std::move(grad)](Node<T>& self) {
    const T g = self.grad[0];
    for (std::size_t l = 0; l < self.parents.size(); ++l) {
      auto& p = *self.parents[l];
      if (!p.requires_grad) continue;
      T* dst = p.grad_buffer().ptr();
      const T* src = grad[l].ptr();
      for (std::size_t i = 0; i < grad[l].size(); ++i) dst[i] += g * src[i];
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Domain-adaptation loss

/// MSE(E_real, E_enh) + ||C(E_real) - C(E_enh)||_F^2 with rows paired. E_enh is
/// held fixed: no gradient ever reaches it.
template <typename T>
Var<T> da_loss(const Var<T>& e_real, const Var<T>& e_enh) {
  require_same_shape(e_real.shape(), e_enh.shape(), "da_loss");
  if (e_real.shape().size() != 2 || e_real.dim(0) < 2) throw ShapeError("da_loss: need [n,d] embeddings with n >= 2");
  const Var<T> target = detach(e_enh);
  const Var<T> mse = mean_all(square(sub(e_real, target)));
  const Var<T> cov = sum_all(square(sub(covariance(e_real), covariance(target))));
  return add(mse, cov);
}

}  // namespace enjoint
