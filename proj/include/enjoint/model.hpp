#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "enjoint/autograd.hpp"
#include "enjoint/image.hpp"
#include "enjoint/ops.hpp"
#include "enjoint/rng.hpp"

namespace enjoint {

struct Anchor {
  double w = 0, h = 0;
  friend bool operator==(const Anchor&, const Anchor&) = default;
};

/// Architecture schedule. The stem halves the resolution and every backbone
/// stage halves it again, so stage i sits at stride 4 << i.
struct NetworkConfig {
  int input_size = 96;
  int stem_channels = 16;
  std::vector<int> stage_channels{32, 64, 128};
  std::vector<int> det_strides{8, 16};
  std::vector<std::vector<Anchor>> anchors{{{10, 10}, {18, 14}, {14, 22}}, {{28, 28}, {44, 32}, {34, 52}}};
  int class_count = 4;
  // One entry per x2 upsampling step of the enhancement decoder.
  std::vector<int> uie_channels{64, 32, 16, 8};

  int stage_stride(std::size_t i) const { return 4 << i; }
  int deepest_stride() const { return stage_stride(stage_channels.size() - 1); }
  int anchors_per_level() const { return static_cast<int>(anchors.front().size()); }
  int outputs_per_anchor() const { return 5 + class_count; }

  int stage_index_for_stride(int stride) const {
    for (std::size_t i = 0; i < stage_channels.size(); ++i)
      if (stage_stride(i) == stride) return static_cast<int>(i);
    return -1;
  }

  void validate() const {
    if (stage_channels.empty()) throw std::invalid_argument("network: need at least one stage");
    if (input_size <= 0 || input_size % deepest_stride() != 0) {
      throw std::invalid_argument("network: input_size must be a positive multiple of the deepest stride");
    }
    if (det_strides.empty() || anchors.size() != det_strides.size()) {
      throw std::invalid_argument("network: one anchor list per detection stride required");
    }
    for (std::size_t i = 0; i < det_strides.size(); ++i) {
      if (i > 0 && det_strides[i] <= det_strides[i - 1]) throw std::invalid_argument("network: det_strides must ascend");
      if (stage_index_for_stride(det_strides[i]) < 0) throw std::invalid_argument("network: det stride without a backbone stage");
      if (anchors[i].size() != anchors.front().size() || anchors[i].empty()) {
        throw std::invalid_argument("network: every level needs the same positive anchor count");
      }
      for (const Anchor& a : anchors[i])
        if (a.w <= 0 || a.h <= 0) throw std::invalid_argument("network: anchors must be positive");
    }
    if (class_count < 1) throw std::invalid_argument("network: class_count must be >= 1");
    int steps = 0;
    for (int s = deepest_stride(); s > 1; s /= 2) ++steps;
    if (static_cast<int>(uie_channels.size()) != steps) {
      throw std::invalid_argument("network: uie_channels needs one entry per upsampling step");
    }
    const int skip = stage_index_for_stride(deepest_stride() / 2);
    if (skip >= 0 && uie_channels.front() != stage_channels[static_cast<std::size_t>(skip)]) {
      throw std::invalid_argument("network: uie_channels[0] must match the skip stage width");
    }
    for (int c : uie_channels)
      if (c < 2 || c % 2) throw std::invalid_argument("network: uie channels must be even and >= 2");
    for (int c : stage_channels)
      if (c < 2 || c % 2) throw std::invalid_argument("network: stage channels must be even and >= 2");
  }
};

inline nlohmann::json to_json(const NetworkConfig& c) {
  nlohmann::json anchors = nlohmann::json::array();
  for (const auto& level : c.anchors) {
    nlohmann::json l = nlohmann::json::array();
    for (const auto& a : level) l.push_back({a.w, a.h});
    anchors.push_back(l);
  }
  return {{"input_size", c.input_size},   {"stem_channels", c.stem_channels}, {"stage_channels", c.stage_channels},
          {"det_strides", c.det_strides}, {"anchors", anchors},               {"class_count", c.class_count},
          {"uie_channels", c.uie_channels}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.input_size = j.value("input_size", c.input_size);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  if (j.contains("stage_channels")) c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  if (j.contains("det_strides")) c.det_strides = j.at("det_strides").get<std::vector<int>>();
  if (j.contains("anchors")) {
    c.anchors.clear();
    for (const auto& l : j.at("anchors")) {
      std::vector<Anchor> level;
      for (const auto& a : l) level.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
      c.anchors.push_back(level);
    }
  }
  c.class_count = j.value("class_count", c.class_count);
  if (j.contains("uie_channels")) c.uie_channels = j.at("uie_channels").get<std::vector<int>>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Layer table

struct ConvSpec {
  std::string name;
  int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
  int in_size = 0;  // square spatial input

  int out_size() const { return (in_size + 2 * pad - k) / stride + 1; }
  std::size_t params() const { return static_cast<std::size_t>(cout) * cin * k * k + static_cast<std::size_t>(cout); }
  std::size_t mult_adds() const {
    const auto o = static_cast<std::size_t>(out_size());
    return static_cast<std::size_t>(cout) * cin * k * k * o * o;
  }
};

namespace detail {

inline void push_csp(std::vector<ConvSpec>& v, const std::string& name, int c, int size) {
  const int h = c / 2;
  v.push_back({name + ".cv1", h, h, 1, 1, 0, size});
  v.push_back({name + ".cv2", h, h, 3, 1, 1, size});
  v.push_back({name + ".cv3", h, h, 1, 1, 0, size});
  v.push_back({name + ".fuse", c, c, 1, 1, 0, size});
}

}  // namespace detail

/// Every convolution of the network in execution order. Names start with
/// exactly one of "backbone.", "det.", "uie.".
inline std::vector<ConvSpec> architecture(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<ConvSpec> v;
  int size = cfg.input_size;
  v.push_back({"backbone.stem", 3, cfg.stem_channels, 3, 2, 1, size});
  size /= 2;
  int c = cfg.stem_channels;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    const std::string n = "backbone.s" + std::to_string(i);
    const int co = cfg.stage_channels[i];
    v.push_back({n + ".down", c, co, 3, 2, 1, size});
    size /= 2;
    detail::push_csp(v, n + ".csp", co, size);
    c = co;
  }
  const int A = cfg.anchors_per_level();
  for (std::size_t l = 0; l < cfg.det_strides.size(); ++l) {
    const int s = cfg.det_strides[l];
    const int ch = cfg.stage_channels[static_cast<std::size_t>(cfg.stage_index_for_stride(s))];
    const int g = cfg.input_size / s;
    const std::string n = "det.l" + std::to_string(l);
    v.push_back({n + ".conv", ch, ch, 3, 1, 1, g});
    v.push_back({n + ".pred", ch, A * cfg.outputs_per_anchor(), 1, 1, 0, g});
  }
  int stride = cfg.deepest_stride();
  for (std::size_t i = 0; i < cfg.uie_channels.size(); ++i) {
    const std::string n = "uie.d" + std::to_string(i);
    const int co = cfg.uie_channels[i];
    v.push_back({n + ".proj", c, co, 1, 1, 0, cfg.input_size / stride});
    stride /= 2;
    detail::push_csp(v, n + ".csp", co, cfg.input_size / stride);
    c = co;
  }
  v.push_back({"uie.out", c, 3, 1, 1, 0, cfg.input_size});
  return v;
}

enum class Mode { Detect, Enhance, Dual };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::Detect: return "det";
    case Mode::Enhance: return "enh";
    case Mode::Dual: return "dual";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "det" || s == "detect") return Mode::Detect;
  if (s == "enh" || s == "enhance") return Mode::Enhance;
  if (s == "dual") return Mode::Dual;
  throw std::invalid_argument("unknown mode: " + s);
}

struct Cost {
  std::size_t params = 0;
  std::size_t mult_adds = 0;
};

/// Parameter and multiply-add counts of the convolutions a part executes.
/// `part` is "backbone", "det" or "uie".
inline Cost count_part(const NetworkConfig& cfg, const std::string& part) {
  Cost c;
  for (const auto& s : architecture(cfg)) {
    if (s.name.rfind(part + ".", 0) == 0) {
      c.params += s.params();
      c.mult_adds += s.mult_adds();
    }
  }
  return c;
}

inline Cost count_params_flops(const NetworkConfig& cfg, Mode mode) {
  Cost total = count_part(cfg, "backbone");
  auto add = [&total](const Cost& c) {
    total.params += c.params;
    total.mult_adds += c.mult_adds;
  };
  if (mode != Mode::Enhance) add(count_part(cfg, "det"));
  if (mode != Mode::Detect) add(count_part(cfg, "uie"));
  return total;
}

// ---------------------------------------------------------------------------
// Parameters

/// Named learnable tensors in registration order.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(Var<T>::leaf(std::move(value), true));
  }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return vars_[it->second];
  }
  Var<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return vars_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Var<T>>& vars() { return vars_; }
  const std::vector<Var<T>>& vars() const { return vars_; }
  std::size_t size() const { return vars_.size(); }

  std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < vars_.size(); ++i)
      if (names_[i].rfind(prefix, 0) == 0) n += vars_[i].value().size();
    return n;
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

  bool all_finite() const {
    return std::all_of(vars_.begin(), vars_.end(), [](const Var<T>& v) { return v.value().all_finite(); });
  }

  /// Deep copy (fresh leaves, no gradients).
  ParamStore clone() const {
    ParamStore out;
    for (std::size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i].value());
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i].value().template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.names_ != b.names_) return false;
    for (std::size_t i = 0; i < a.vars_.size(); ++i)
      if (!(a.vars_[i].value() == b.vars_[i].value())) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Learnable parameters plus the optimizer step they correspond to.
template <typename T>
struct NetworkWeights {
  ParamStore<T> params;
  std::int64_t step = 0;
};

/// He-uniform kernels (leaky slope 0.1), zero biases; detection biases start at
/// the usual low objectness / class priors.
template <typename T>
NetworkWeights<T> init_weights(const NetworkConfig& cfg, std::uint64_t seed) {
  NetworkWeights<T> w;
  Rng rng(seed);
  const double slope = kLeakySlope;
  for (const auto& s : architecture(cfg)) {
    const int fan_in = s.cin * s.k * s.k;
    const double bound = std::sqrt(6.0 / ((1 + slope * slope) * fan_in));
    Tensor<T> k({s.cout, s.cin, s.k, s.k});
    for (auto& v : k.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    Tensor<T> b({s.cout});
    if (s.name.size() > 5 && s.name.rfind(".pred") == s.name.size() - 5) {
      const int level = std::stoi(s.name.substr(5, s.name.find('.', 5) - 5));
      const double cells = std::pow(cfg.input_size / static_cast<double>(cfg.det_strides[static_cast<std::size_t>(level)]), 2);
      const double obj_prior = std::log(8.0 / cells);
      const double cls_prior = std::log(0.6 / (cfg.class_count - 0.99 + 1e-9));
      const int per = cfg.outputs_per_anchor();
      for (int a = 0; a < cfg.anchors_per_level(); ++a) {
        b[static_cast<std::size_t>(a * per + 4)] = static_cast<T>(obj_prior);
        for (int c = 0; c < cfg.class_count; ++c) b[static_cast<std::size_t>(a * per + 5 + c)] = static_cast<T>(cls_prior);
      }
    }
    w.params.add(s.name + ".w", std::move(k));
    w.params.add(s.name + ".b", std::move(b));
  }
  return w;
}

template <typename T>
NetworkWeights<T> zero_weights(const NetworkConfig& cfg) {
  NetworkWeights<T> w;
  for (const auto& s : architecture(cfg)) {
    w.params.add(s.name + ".w", Tensor<T>({s.cout, s.cin, s.k, s.k}));
    w.params.add(s.name + ".b", Tensor<T>({s.cout}));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
struct BackboneFeatures {
  std::vector<Var<T>> stages;  // stage i at stride 4 << i
  Var<T> embedding;            // [N, C_last], spatial mean of the deepest stage
};

/// Shared-backbone network with independent detection and enhancement heads.
template <typename T>
class Network {
 public:
  explicit Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    for (auto& s : architecture(cfg_)) specs_.emplace(s.name, s);
  }
  Network(const Network& o) : cfg_(o.cfg_), specs_(o.specs_) {}

  const NetworkConfig& config() const { return cfg_; }
  std::size_t backbone_calls() const { return backbone_calls_.load(); }

  BackboneFeatures<T> backbone(const ParamStore<T>& p, const Var<T>& images) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.input_size || s[3] != cfg_.input_size) {
      throw ShapeError("backbone: expected [N,3," + std::to_string(cfg_.input_size) + "," +
                       std::to_string(cfg_.input_size) + "], got " + shape_str(s));
    }
    ++backbone_calls_;
    BackboneFeatures<T> f;
    Var<T> x = conv_act(p, "backbone.stem", images);
    for (std::size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
      const std::string n = "backbone.s" + std::to_string(i);
      x = conv_act(p, n + ".down", x);
      x = csp(p, n + ".csp", x);
      f.stages.push_back(x);
    }
    f.embedding = global_avg_pool(x);
    return f;
  }

  /// Enhanced image batch [N,3,H,W] in (0,1).
  Var<T> enhance(const ParamStore<T>& p, const BackboneFeatures<T>& f) const {
    Var<T> x = f.stages.back();
    const int skip = cfg_.stage_index_for_stride(cfg_.deepest_stride() / 2);
    for (std::size_t i = 0; i < cfg_.uie_channels.size(); ++i) {
      const std::string n = "uie.d" + std::to_string(i);
      x = conv_act(p, n + ".proj", x);
      x = bilinear_upsample(x, 2);
      if (i == 0 && skip >= 0) x = add(x, f.stages[static_cast<std::size_t>(skip)]);
      x = csp(p, n + ".csp", x);
    }
    return sigmoid(conv(p, "uie.out", x));
  }

  /// Raw prediction grids, one [N, A*(5+K), S/s, S/s] tensor per detection stride.
  std::vector<Var<T>> detect(const ParamStore<T>& p, const BackboneFeatures<T>& f) const {
    std::vector<Var<T>> out;
    for (std::size_t l = 0; l < cfg_.det_strides.size(); ++l) {
      const std::string n = "det.l" + std::to_string(l);
      const auto& stage = f.stages[static_cast<std::size_t>(cfg_.stage_index_for_stride(cfg_.det_strides[l]))];
      out.push_back(conv(p, n + ".pred", conv_act(p, n + ".conv", stage)));
    }
    return out;
  }

 private:
  Var<T> conv(const ParamStore<T>& p, const std::string& name, const Var<T>& x) const {
    const ConvSpec& s = specs_.at(name);
    return conv2d(x, p.get(name + ".w"), p.get(name + ".b"), s.stride, s.pad);
  }
  Var<T> conv_act(const ParamStore<T>& p, const std::string& name, const Var<T>& x) const {
    return leaky_relu(conv(p, name, x));
  }
  // Split channels 1:1, bottleneck one half, concatenate, fuse.
  Var<T> csp(const ParamStore<T>& p, const std::string& name, const Var<T>& x) const {
    const int c = x.dim(1);
    Var<T> keep = slice_channels(x, 0, c / 2);
    Var<T> b = slice_channels(x, c / 2, c);
    b = conv_act(p, name + ".cv1", b);
    b = conv_act(p, name + ".cv2", b);
    b = conv_act(p, name + ".cv3", b);
    return conv_act(p, name + ".fuse", concat_channels(keep, b));
  }

  NetworkConfig cfg_;
  std::unordered_map<std::string, ConvSpec> specs_;
  mutable std::atomic<std::size_t> backbone_calls_{0};
};

// ---------------------------------------------------------------------------
// Detection decoding

struct Detection {
  Box box;
  int class_id = 0;
  float confidence = 0;
};

struct DecodeParams {
  double conf_thresh = 0.25;
  double nms_iou = 0.45;
  std::size_t max_detections = 300;
};

inline double box_iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Decodes raw grids of one image into detections: center
/// (cell + 2*sigmoid(t) - 0.5) * stride, size anchor * (2*sigmoid(t))^2,
/// confidence sigmoid(obj) * max_k sigmoid(cls_k), then greedy per-class NMS.
/// Output is sorted by confidence, highest first; boxes are clamped to the image.
template <typename T>
std::vector<Detection> decode_detections(const std::vector<Tensor<T>>& grids, int image_index, const NetworkConfig& cfg,
                                         const DecodeParams& dp) {
  if (!(dp.conf_thresh > 0 && dp.conf_thresh < 1 && dp.nms_iou > 0 && dp.nms_iou < 1)) {
    throw std::invalid_argument("decode_detections: thresholds must lie in (0,1)");
  }
  const int A = cfg.anchors_per_level();
  const int per = cfg.outputs_per_anchor();
  const double S = cfg.input_size;
  std::vector<Detection> cand;
  for (std::size_t l = 0; l < grids.size(); ++l) {
    const Tensor<T>& g = grids[l];
    const int stride = cfg.det_strides[l];
    const int H = g.dim(2), W = g.dim(3);
    if (g.dim(1) != A * per) throw ShapeError("decode_detections: grid channel mismatch");
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const T* base = g.ptr() + static_cast<std::size_t>(image_index) * g.dim(1) * hw;
    for (int a = 0; a < A; ++a) {
      const Anchor& an = cfg.anchors[l][static_cast<std::size_t>(a)];
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          auto ch = [&](int k) { return static_cast<double>(base[static_cast<std::size_t>(a * per + k) * hw + static_cast<std::size_t>(y) * W + x]); };
          const double obj = sigmoid_scalar(ch(4));
          if (obj < dp.conf_thresh) continue;
          int best = 0;
          double best_p = -1;
          for (int k = 0; k < cfg.class_count; ++k) {
            const double pk = sigmoid_scalar(ch(5 + k));
            if (pk > best_p) {
              best_p = pk;
              best = k;
            }
          }
          const double conf = obj * best_p;
          if (conf < dp.conf_thresh) continue;
          const double cx = (x + 2 * sigmoid_scalar(ch(0)) - 0.5) * stride;
          const double cy = (y + 2 * sigmoid_scalar(ch(1)) - 0.5) * stride;
          const double sw = 2 * sigmoid_scalar(ch(2)), sh = 2 * sigmoid_scalar(ch(3));
          const double bw = an.w * sw * sw, bh = an.h * sh * sh;
          Box b{std::clamp(cx - bw / 2, 0.0, S), std::clamp(cy - bh / 2, 0.0, S), std::clamp(cx + bw / 2, 0.0, S),
                std::clamp(cy + bh / 2, 0.0, S)};
          if (!b.valid()) continue;
          cand.push_back({b, best, static_cast<float>(conf)});
        }
    }
  }
  std::stable_sort(cand.begin(), cand.end(), [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> keep;
  for (const Detection& d : cand) {
    bool suppressed = false;
    for (const Detection& k : keep) {
      if (k.class_id == d.class_id && box_iou(k.box, d.box) > dp.nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      keep.push_back(d);
      if (keep.size() >= dp.max_detections) break;
    }
  }
  return keep;
}

// ---------------------------------------------------------------------------
// Inference

struct InferenceResult {
  std::optional<std::vector<std::vector<Detection>>> detections;  // per image
  std::optional<std::vector<Image>> enhanced;
};

/// Runs the backbone once per batch, then only the heads the mode needs.
inline InferenceResult forward(const Network<float>& net, const ParamStore<float>& params, const std::vector<Image>& images,
                               Mode mode, const DecodeParams& dp = {}) {
  InferenceResult r;
  if (mode != Mode::Enhance) r.detections.emplace();
  if (mode != Mode::Detect) r.enhanced.emplace();
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    std::vector<const Image*> chunk;
    for (std::size_t i = start; i < std::min(images.size(), start + kChunk); ++i) chunk.push_back(&images[i]);
    const auto x = Var<float>::constant(images_to_tensor(chunk));
    const auto feats = net.backbone(params, x);
    if (r.detections) {
      const auto grids = net.detect(params, feats);
      std::vector<Tensor<float>> raw;
      for (const auto& g : grids) raw.push_back(g.value());
      for (std::size_t i = 0; i < chunk.size(); ++i) r.detections->push_back(decode_detections(raw, static_cast<int>(i), net.config(), dp));
    }
    if (r.enhanced) {
      const auto enh = net.enhance(params, feats);
      for (std::size_t i = 0; i < chunk.size(); ++i) r.enhanced->push_back(tensor_to_image(enh.value(), static_cast<int>(i)));
    }
  }
  return r;
}

inline InferenceResult forward(const Network<float>& net, const ParamStore<float>& params, const Image& image, Mode mode,
                               const DecodeParams& dp = {}) {
  return forward(net, params, std::vector<Image>{image}, mode, dp);
}

}  // namespace enjoint
