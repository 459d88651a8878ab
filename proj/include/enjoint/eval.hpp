#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "enjoint/aquasynth.hpp"
#include "enjoint/image.hpp"
#include "enjoint/losses.hpp"
#include "enjoint/model.hpp"

namespace enjoint {

/// Intersection over union; zero-area boxes are rejected.
inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: zero-area box");
  return box_iou(a, b);
}

struct ClassCounts {
  int tp = 0, fp = 0, gt = 0;
  int unmatched() const { return gt - tp; }
};

/// Greedy matching of one class across images, detections taken in
/// descending confidence (ties: image order, then list order). A detection is
/// a true positive when its best-IoU unmatched same-class ground truth in the
/// same image reaches `thr`; equal IoUs go to the lowest ground-truth index.
/// Returns the area under the precision envelope (all-point interpolation).
inline double average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts, int class_id,
                                double thr, ClassCounts* counts = nullptr) {
  if (dets.size() != gts.size()) throw std::invalid_argument("average_precision: detection and ground-truth image counts differ");
  struct Cand {
    std::size_t image, order;
    const Detection* d;
  };
  std::vector<Cand> cand;
  int n_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t k = 0; k < dets[i].size(); ++k)
      if (dets[i][k].class_id == class_id) cand.push_back({i, k, &dets[i][k]});
    for (int c : gts[i].classes) n_gt += c == class_id;
  }
  std::stable_sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) { return a.d->confidence > b.d->confidence; });

  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].boxes.size(), 0);
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const Cand& c : cand) {
    const auto& gt = gts[c.image];
    double best = -1;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gt.boxes.size(); ++j) {
      if (gt.classes[j] != class_id || used[c.image][j]) continue;
      const double v = box_iou(c.d->box, gt.boxes[j]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best >= thr) {
      used[c.image][best_j] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(n_gt ? static_cast<double>(tp) / n_gt : 0.0);
  }
  if (counts) *counts = {tp, fp, n_gt};
  if (n_gt == 0) return 0.0;

  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct APResult {
  std::map<int, double> per_class_ap50;
  std::map<int, double> per_class_ap5095;
  std::map<int, ClassCounts> counts;  // at IoU 0.5
  std::vector<int> excluded;          // classes absent from detections and ground truth
  double map50 = 0;
  double map5095 = 0;
};

/// Per-class AP at 0.5 and averaged over 0.5:0.05:0.95; mAP is the mean over
/// classes that appear in the detections or the ground truth.
inline APResult evaluate_map(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts, int class_count) {
  if (dets.size() != gts.size()) throw std::invalid_argument("evaluate_map: detection and ground-truth image counts differ");
  std::set<int> present;
  for (const auto& v : dets)
    for (const auto& d : v) present.insert(d.class_id);
  for (const auto& g : gts) present.insert(g.classes.begin(), g.classes.end());

  APResult r;
  const auto thrs = coco_thresholds();
  for (int c = 0; c < class_count; ++c) {
    if (!present.count(c)) {
      r.excluded.push_back(c);
      continue;
    }
    ClassCounts cc;
    r.per_class_ap50[c] = average_precision(dets, gts, c, 0.5, &cc);
    r.counts[c] = cc;
    double acc = 0;
    for (double t : thrs) acc += average_precision(dets, gts, c, t);
    r.per_class_ap5095[c] = acc / static_cast<double>(thrs.size());
  }
  if (!r.per_class_ap50.empty()) {
    for (const auto& [c, v] : r.per_class_ap50) r.map50 += v;
    for (const auto& [c, v] : r.per_class_ap5095) r.map5095 += v;
    r.map50 /= static_cast<double>(r.per_class_ap50.size());
    r.map5095 /= static_cast<double>(r.per_class_ap5095.size());
  }
  return r;
}

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) with peak 1; identical images report the cap.
inline double psnr(const Image& a, const Image& b) {
  if (!a.same_size(b)) throw ShapeError("psnr: image sizes differ");
  double acc = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.data().size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// The gray-world loss evaluated on one image.
inline double gray_world_deviation(const Image& im) {
  return gray_world_loss(Var<double>::constant(image_to_tensor<double>(im))).value().item();
}

// ---------------------------------------------------------------------------
// Split-level evaluation

/// Decoding used for mAP: a low confidence floor so the PR curve is complete.
inline DecodeParams eval_decode_params() {
  DecodeParams dp;
  dp.conf_thresh = 0.001;
  dp.nms_iou = 0.6;
  dp.max_detections = 300;
  return dp;
}

struct EnhancementMetrics {
  double psnr_enhanced = 0, psnr_degraded = 0;
  double gray_world_enhanced = 0, gray_world_degraded = 0;
};

struct SplitReport {
  std::string name;
  WaterType water = WaterType::Clear;
  APResult ap;
  std::optional<EnhancementMetrics> enhancement;
};

inline std::vector<GroundTruth> split_ground_truth(const EvalSplit& split) {
  std::vector<GroundTruth> g;
  for (const auto& s : split.samples) g.push_back({s.sample.boxes, s.sample.classes});
  return g;
}

inline std::vector<Image> split_images(const EvalSplit& split) {
  std::vector<Image> v;
  for (const auto& s : split.samples) v.push_back(s.sample.image);
  return v;
}

inline EnhancementMetrics enhancement_metrics(const EvalSplit& split, const std::vector<Image>& enhanced) {
  if (enhanced.size() != split.samples.size()) throw std::invalid_argument("enhancement_metrics: count mismatch");
  EnhancementMetrics m;
  for (std::size_t i = 0; i < enhanced.size(); ++i) {
    const auto& s = split.samples[i];
    m.psnr_enhanced += psnr(enhanced[i], s.clear);
    m.psnr_degraded += psnr(s.sample.image, s.clear);
    m.gray_world_enhanced += gray_world_deviation(enhanced[i]);
    m.gray_world_degraded += gray_world_deviation(s.sample.image);
  }
  const double n = static_cast<double>(enhanced.size());
  m.psnr_enhanced /= n;
  m.psnr_degraded /= n;
  m.gray_world_enhanced /= n;
  m.gray_world_degraded /= n;
  return m;
}

/// Runs the network in dual mode over a split. With `oracle` set, ground
/// truth stands in for the detector (confidence 1).
inline SplitReport evaluate_split(const Network<float>& net, const ParamStore<float>& params, const EvalSplit& split,
                                  bool oracle = false) {
  SplitReport r;
  r.name = split.name;
  r.water = split.water;
  const auto gts = split_ground_truth(split);
  const auto images = split_images(split);
  const auto out = forward(net, params, images, oracle ? Mode::Enhance : Mode::Dual, eval_decode_params());
  std::vector<std::vector<Detection>> dets;
  if (oracle) {
    for (const auto& g : gts) {
      std::vector<Detection> v;
      for (std::size_t k = 0; k < g.boxes.size(); ++k) v.push_back({g.boxes[k], g.classes[k], 1.0f});
      dets.push_back(std::move(v));
    }
  } else {
    dets = *out.detections;
  }
  r.ap = evaluate_map(dets, gts, net.config().class_count);
  r.enhancement = enhancement_metrics(split, *out.enhanced);
  return r;
}

inline nlohmann::json to_json(const APResult& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, v] : r.per_class_ap50) {
    const auto& cc = r.counts.at(c);
    per_class[std::to_string(c)] = {{"ap50", v}, {"ap5095", r.per_class_ap5095.at(c)}, {"tp", cc.tp}, {"fp", cc.fp},
                                    {"gt", cc.gt}, {"unmatched", cc.unmatched()}};
  }
  return {{"map50", r.map50}, {"map5095", r.map5095}, {"per_class", per_class}, {"excluded_classes", r.excluded}};
}

inline nlohmann::json to_json(const SplitReport& r) {
  nlohmann::json j{{"water", to_string(r.water)}, {"detection", to_json(r.ap)}};
  if (r.enhancement) {
    const auto& e = *r.enhancement;
    j["enhancement"] = {{"psnr_enhanced", e.psnr_enhanced},
                        {"psnr_degraded", e.psnr_degraded},
                        {"gray_world_enhanced", e.gray_world_enhanced},
                        {"gray_world_degraded", e.gray_world_degraded}};
  }
  return j;
}

/// Report over several splits plus unweighted means across them.
inline nlohmann::json evaluation_report(const std::vector<SplitReport>& splits) {
  nlohmann::json j{{"splits", nlohmann::json::object()}};
  double m50 = 0, m5095 = 0;
  EnhancementMetrics e;
  int enhanced = 0;
  for (const auto& s : splits) {
    j["splits"][s.name] = to_json(s);
    m50 += s.ap.map50;
    m5095 += s.ap.map5095;
    if (s.enhancement) {
      e.psnr_enhanced += s.enhancement->psnr_enhanced;
      e.psnr_degraded += s.enhancement->psnr_degraded;
      e.gray_world_enhanced += s.enhancement->gray_world_enhanced;
      e.gray_world_degraded += s.enhancement->gray_world_degraded;
      ++enhanced;
    }
  }
  if (!splits.empty()) {
    j["overall"] = {{"map50", m50 / static_cast<double>(splits.size())}, {"map5095", m5095 / static_cast<double>(splits.size())}};
  }
  if (enhanced > 0) {
    const double n = enhanced;
    j["overall"]["enhancement"] = {{"psnr_enhanced", e.psnr_enhanced / n},
                                   {"psnr_degraded", e.psnr_degraded / n},
                                   {"gray_world_enhanced", e.gray_world_enhanced / n},
                                   {"gray_world_degraded", e.gray_world_degraded / n}};
  }
  return j;
}

}  // namespace enjoint
