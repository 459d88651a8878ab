#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "enjoint/aquasynth.hpp"
#include "enjoint/augment.hpp"
#include "enjoint/checkpoint.hpp"
#include "enjoint/losses.hpp"
#include "enjoint/model.hpp"
#include "enjoint/optim.hpp"
#include "enjoint/parallel.hpp"
#include "enjoint/rng.hpp"

namespace enjoint {

enum class Stage { BurnIn, MutualLearning, DomainAdaptation };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::BurnIn: return "burnin";
    case Stage::MutualLearning: return "mutual";
    case Stage::DomainAdaptation: return "da";
  }
  return "?";
}

/// Step thresholds. mutual == total is accepted and means the
/// domain-adaptation stage is empty.
struct StageSchedule {
  std::int64_t burn_in = 1500;
  std::int64_t mutual = 2400;
  std::int64_t total = 3000;

  static StageSchedule desk() { return {1500, 2400, 3000}; }
  static StageSchedule full_scale() { return {80000, 120000, 150000}; }

  void validate() const {
    if (!(0 < burn_in && burn_in < mutual && mutual <= total)) {
      throw std::invalid_argument("schedule: need 0 < N_b < N_m <= N, got " + std::to_string(burn_in) + "/" +
                                  std::to_string(mutual) + "/" + std::to_string(total));
    }
  }

  Stage stage_at(std::int64_t step) const {
    if (step < 0 || step >= total) throw std::out_of_range("step " + std::to_string(step) + " outside [0, N)");
    if (step < burn_in) return Stage::BurnIn;
    if (step < mutual) return Stage::MutualLearning;
    return Stage::DomainAdaptation;
  }

  friend bool operator==(const StageSchedule&, const StageSchedule&) = default;
};

/// Loss terms trained at `step`; later stages keep the earlier terms.
inline std::set<std::string> active_losses(std::int64_t step, const StageSchedule& s) {
  switch (s.stage_at(step)) {
    case Stage::BurnIn: return {"enh", "det_r"};
    case Stage::MutualLearning: return {"enh", "det_r", "uns", "det_e"};
    case Stage::DomainAdaptation: return {"enh", "det_r", "uns", "det_e", "da"};
  }
  return {};
}

struct LossWeights {
  double enh = 1, det_r = 1, uns = 1, det_e = 1, da = 1;
};

struct TrainConfig {
  StageSchedule schedule;
  double base_lr = 0.01;
  double momentum = 0.9;
  double lr_decay = 0.1;
  int det_batch = 16;
  int enh_batch = 8;
  std::uint64_t seed = 1;
  LossWeights weights;
  WeakAugmentOptions weak;
  StrongAugmentOptions strong;
  std::int64_t checkpoint_every = 250;

  void validate() const {
    schedule.validate();
    if (!(base_lr > 0)) throw std::invalid_argument("train: base_lr must be > 0");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw std::invalid_argument("train: lr_decay must lie in (0,1]");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("train: momentum must lie in [0,1)");
    if (det_batch < 2 || enh_batch < 1) throw std::invalid_argument("train: det_batch >= 2 and enh_batch >= 1 required");
    if (checkpoint_every < 1) throw std::invalid_argument("train: checkpoint_every must be >= 1");
  }
};

/// base_lr before N_b, times decay in [N_b, N_m), times decay^2 from N_m on.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  switch (cfg.schedule.stage_at(step)) {
    case Stage::BurnIn: return cfg.base_lr;
    case Stage::MutualLearning: return cfg.base_lr * cfg.lr_decay;
    case Stage::DomainAdaptation: return cfg.base_lr * cfg.lr_decay * cfg.lr_decay;
  }
  return 0.0;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"schedule", {{"burn_in", c.schedule.burn_in}, {"mutual", c.schedule.mutual}, {"total", c.schedule.total}}},
          {"base_lr", c.base_lr},
          {"momentum", c.momentum},
          {"lr_decay", c.lr_decay},
          {"det_batch", c.det_batch},
          {"enh_batch", c.enh_batch},
          {"seed", c.seed},
          {"loss_weights", {{"enh", c.weights.enh}, {"det_r", c.weights.det_r}, {"uns", c.weights.uns}, {"det_e", c.weights.det_e}, {"da", c.weights.da}}},
          {"weak_augment", {{"flip_prob", c.weak.flip_prob}, {"min_crop_area", c.weak.min_crop_area}}},
          {"strong_augment",
           {{"random_center", c.strong.random_center},
            {"jitter", c.strong.jitter},
            {"brightness", c.strong.brightness},
            {"saturation", c.strong.saturation},
            {"blur", c.strong.blur},
            {"blur_prob", c.strong.blur_prob},
            {"flip", c.strong.flip},
            {"crop", c.strong.crop},
            {"min_crop_area", c.strong.min_crop_area}}},
          {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.burn_in = s.value("burn_in", c.schedule.burn_in);
    c.schedule.mutual = s.value("mutual", c.schedule.mutual);
    c.schedule.total = s.value("total", c.schedule.total);
  }
  c.base_lr = j.value("base_lr", c.base_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.det_batch = j.value("det_batch", c.det_batch);
  c.enh_batch = j.value("enh_batch", c.enh_batch);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.enh = w.value("enh", 1.0);
    c.weights.det_r = w.value("det_r", 1.0);
    c.weights.uns = w.value("uns", 1.0);
    c.weights.det_e = w.value("det_e", 1.0);
    c.weights.da = w.value("da", 1.0);
  }
  if (j.contains("weak_augment")) {
    const auto& w = j.at("weak_augment");
    c.weak.flip_prob = w.value("flip_prob", c.weak.flip_prob);
    c.weak.min_crop_area = w.value("min_crop_area", c.weak.min_crop_area);
  }
  if (j.contains("strong_augment")) {
    const auto& s = j.at("strong_augment");
    c.strong.random_center = s.value("random_center", c.strong.random_center);
    c.strong.jitter = s.value("jitter", c.strong.jitter);
    c.strong.brightness = s.value("brightness", c.strong.brightness);
    c.strong.saturation = s.value("saturation", c.strong.saturation);
    c.strong.blur = s.value("blur", c.strong.blur);
    c.strong.blur_prob = s.value("blur_prob", c.strong.blur_prob);
    c.strong.flip = s.value("flip", c.strong.flip);
    c.strong.crop = s.value("crop", c.strong.crop);
    c.strong.min_crop_area = s.value("min_crop_area", c.strong.min_crop_area);
  }
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// State and batches

struct TrainState {
  NetworkConfig network;
  ParamStore<float> params;
  std::vector<Tensor<float>> velocity;
  std::int64_t step = 0;
};

namespace detail {
inline constexpr std::uint64_t kInitStream = 101;
inline constexpr std::uint64_t kBatchStream = 102;
}  // namespace detail

inline TrainState initial_state(const NetworkConfig& net, const TrainConfig& cfg) {
  TrainState st;
  st.network = net;
  st.params = init_weights<float>(net, derive_seed(cfg.seed, detail::kInitStream, 0)).params;
  for (const auto& v : st.params.vars()) st.velocity.emplace_back(v.shape());
  return st;
}

inline Checkpoint to_checkpoint(const TrainState& st, nlohmann::json meta) {
  Checkpoint ck;
  ck.network = st.network;
  ck.step = st.step;
  ck.params = st.params.clone();
  ck.velocity = st.velocity;
  ck.meta = std::move(meta);
  return ck;
}

inline TrainState from_checkpoint(const Checkpoint& ck) {
  check_params_match(ck.network, ck.params);
  TrainState st;
  st.network = ck.network;
  st.params = ck.params.clone();
  st.step = ck.step;
  st.velocity = ck.velocity;
  if (st.velocity.empty())
    for (const auto& v : st.params.vars()) st.velocity.emplace_back(v.shape());
  return st;
}

struct StepBatch {
  std::vector<PairedSample> enh;   // weakly augmented D_ps pairs
  std::vector<LabeledSample> det;  // strongly augmented D_lr mosaics
};

/// Batch for `step`; depends only on (seed, step) and the datasets.
inline StepBatch make_batch(const Datasets& ds, const TrainConfig& cfg, std::int64_t step) {
  if (ds.paired.empty() || ds.labeled.empty()) throw std::invalid_argument("make_batch: empty training set");
  Rng rng(derive_seed(cfg.seed, detail::kBatchStream, static_cast<std::uint64_t>(step)));
  const int n_ps = static_cast<int>(ds.paired.size());
  const int n_lr = static_cast<int>(ds.labeled.size());
  std::vector<std::pair<int, std::uint64_t>> enh_draws;
  for (int i = 0; i < cfg.enh_batch; ++i) {
    const int idx = rng.randint(0, n_ps - 1);
    enh_draws.emplace_back(idx, rng.next());
  }
  std::vector<std::pair<std::array<int, 4>, std::uint64_t>> det_draws;
  for (int i = 0; i < cfg.det_batch; ++i) {
    std::array<int, 4> idx{};
    for (int& k : idx) k = rng.randint(0, n_lr - 1);
    det_draws.emplace_back(idx, rng.next());
  }

  StepBatch b;
  b.enh.resize(enh_draws.size());
  b.det.resize(det_draws.size());
  parallel_for(enh_draws.size() + det_draws.size(), [&](std::size_t i) {
    if (i < enh_draws.size()) {
      b.enh[i] = weak_augment(ds.paired[static_cast<std::size_t>(enh_draws[i].first)], enh_draws[i].second, cfg.weak);
      return;
    }
    const auto& [idx, seed] = det_draws[i - enh_draws.size()];
    std::array<const LabeledSample*, 4> src{};
    for (std::size_t k = 0; k < 4; ++k) src[k] = &ds.labeled[static_cast<std::size_t>(idx[k])];
    b.det[i - enh_draws.size()] = strong_augment(src, seed, cfg.strong);
  });
  return b;
}

/// Number of times the domain-adaptation loss has been evaluated by train_step.
inline std::atomic<std::uint64_t>& da_path_counter() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

struct StepOutcome {
  LossReport report;
  double lr = 0;
  Stage stage = Stage::BurnIn;
  int gt_boxes = 0;
  int unmatched = 0;
};

/// Weighted sum of the losses in `active` for one batch, with each term's
/// value recorded in `report`. D_le is formed here from the current
/// enhancement head. Templated so the composite can be gradient-checked in
/// double precision.
template <typename T>
Var<T> composite_loss(const Network<T>& net, const ParamStore<T>& p, const StepBatch& batch, const std::set<std::string>& active,
                      const LossWeights& w, LossReport& report, int* gt_boxes = nullptr, int* unmatched = nullptr,
                      const DetLossOptions& det_opt = {}) {
  const NetworkConfig& ncfg = net.config();
  std::vector<Var<T>> terms;
  auto push = [&terms](std::optional<double>& slot, const Var<T>& v, double weight) {
    slot = static_cast<double>(v.value().item());
    terms.push_back(weight == 1.0 ? v : scale(v, static_cast<T>(weight)));
  };

  // enh: paired synthetic images through the enhancement head.
  if (active.count("enh")) {
    std::vector<const Image*> deg, clr;
    for (const auto& s : batch.enh) {
      deg.push_back(&s.degraded);
      clr.push_back(&s.clear);
    }
    const auto f = net.backbone(p, Var<T>::constant(images_to_tensor<T>(deg)));
    push(report.enh, enh_loss(net.enhance(p, f), Var<T>::constant(images_to_tensor<T>(clr))), w.enh);
  }

  // det_r: labeled raw images.
  std::vector<const Image*> raw;
  std::vector<GroundTruth> gts;
  for (const auto& s : batch.det) {
    raw.push_back(&s.image);
    gts.push_back({s.boxes, s.classes});
    if (gt_boxes) *gt_boxes += static_cast<int>(s.boxes.size());
  }
  const auto f_raw = net.backbone(p, Var<T>::constant(images_to_tensor<T>(raw)));
  if (active.count("det_r")) {
    auto d = det_loss(net.detect(p, f_raw), gts, ncfg, det_opt);
    if (unmatched) *unmatched = d.unmatched;
    push(report.det_r, d.total, w.det_r);
  }

  if (active.count("uns")) {
    // The same raw batch doubles as D_ur; its enhancement, paired with the
    // source labels, is D_le. Gradients of det_e reach the enhancement head.
    const auto enhanced = net.enhance(p, f_raw);
    push(report.uns, gray_world_loss(enhanced), w.uns);
    const auto f_enh = net.backbone(p, enhanced);
    push(report.det_e, det_loss(net.detect(p, f_enh), gts, ncfg, det_opt).total, w.det_e);
    if (active.count("da")) {
      ++da_path_counter();
      push(report.da, da_loss(f_raw.embedding, f_enh.embedding), w.da);
    }
  }
  return add_n(terms);
}

/// One optimizer step: every active loss enters a single total, one backward
/// pass, one momentum-SGD update. Throws NumericError on a non-finite loss or
/// gradient, leaving the state untouched.
inline StepOutcome train_step(TrainState& st, const Network<float>& net, const TrainConfig& cfg, const StepBatch& batch) {
  const auto active = active_losses(st.step, cfg.schedule);
  StepOutcome out;
  out.stage = cfg.schedule.stage_at(st.step);
  out.lr = lr_at(st.step, cfg);
  auto& p = st.params;
  p.zero_grad();

  const Var<float> total = composite_loss(net, p, batch, active, cfg.weights, out.report, &out.gt_boxes, &out.unmatched);
  out.report.total = static_cast<double>(total.value().item());
  if (!std::isfinite(out.report.total)) {
    p.zero_grad();
    throw NumericError("train_step: non-finite total loss at step " + std::to_string(st.step));
  }
  backward(total);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.vars()[i].has_grad() && !p.vars()[i].grad().all_finite()) {
      p.zero_grad();
      throw NumericError("train_step: non-finite gradient for " + p.names()[i] + " at step " + std::to_string(st.step));
    }
  }
  const auto lr = static_cast<float>(out.lr);
  const auto mom = static_cast<float>(cfg.momentum);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& v = p.vars()[i];
    sgd_update_inplace(v.mutable_value(), v.grad(), st.velocity[i], lr, mom);
  }
  p.zero_grad();
  ++st.step;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

inline std::string format_log_row(std::int64_t step, const StepOutcome& o) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << step << ',' << to_string(o.stage);
  for (const auto& t : {o.report.enh, o.report.det_r, o.report.uns, o.report.det_e, o.report.da}) {
    os << ',';
    if (t) os << *t;
  }
  os << ',' << o.report.total << ',' << o.lr;
  return os.str();
}

inline constexpr const char* kLogHeader = "step,stage,enh,det_r,uns,det_e,da,total,lr";

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::optional<std::int64_t> stop_after;  // stop once this many steps are done
  std::string dataset_hash;
  std::function<void(const std::string&)> on_event;
};

struct TrainResult {
  std::filesystem::path burnin, mutual, final, log;
  TrainState state;
  bool completed = false;
};

inline std::filesystem::path stage_checkpoint_path(const std::filesystem::path& dir, const std::string& which) {
  return dir / ("checkpoint_" + which + ".ckpt");
}

namespace detail {

// Keeps the rows of an existing log whose step precedes `step`.
inline std::vector<std::string> log_rows_before(const std::filesystem::path& log, std::int64_t step) {
  std::vector<std::string> rows;
  std::ifstream is(log);
  if (!is) return rows;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) < step) rows.push_back(line);
  }
  return rows;
}

}  // namespace detail

/// Runs the three-stage loop from step 0 (or from a checkpoint). Writes
/// checkpoint_{burnin,mutual,final}.ckpt at N_b, N_m and N, a rolling
/// checkpoint_last.ckpt every checkpoint_every steps, train_log.csv (one row per
/// step) and data_quality.csv (unmatched ground truth per epoch).
inline TrainResult run_training(const NetworkConfig& net_cfg, const TrainConfig& cfg, const Datasets& ds, const RunOptions& opt) {
  namespace fs = std::filesystem;
  net_cfg.validate();
  cfg.validate();
  fs::create_directories(opt.out_dir);
  const Network<float> net(net_cfg);
  auto event = [&opt](const std::string& msg) {
    if (opt.on_event) opt.on_event(msg);
  };

  TrainResult res;
  res.burnin = stage_checkpoint_path(opt.out_dir, "burnin");
  res.mutual = stage_checkpoint_path(opt.out_dir, "mutual");
  res.final = stage_checkpoint_path(opt.out_dir, "final");
  res.log = opt.out_dir / "train_log.csv";

  std::vector<std::string> prior_rows;
  if (opt.resume) {
    const Checkpoint ck = load_checkpoint(*opt.resume);
    if (!(ck.network.input_size == net_cfg.input_size && to_json(ck.network) == to_json(net_cfg))) {
      throw std::runtime_error("resume: checkpoint network config differs from the requested one");
    }
    if (ck.meta.contains("train") && ck.meta.at("train").value("seed", cfg.seed) != cfg.seed) {
      throw std::runtime_error("resume: checkpoint was trained with a different seed");
    }
    res.state = from_checkpoint(ck);
    if (res.state.step > cfg.schedule.total) throw std::runtime_error("resume: checkpoint step beyond N");
    auto src_log = opt.resume->parent_path() / "train_log.csv";
    prior_rows = detail::log_rows_before(fs::exists(res.log) ? res.log : src_log, res.state.step);
    event("resumed at step " + std::to_string(res.state.step));
  } else {
    res.state = initial_state(net_cfg, cfg);
  }

  {
    std::ofstream log(res.log, std::ios::trunc);
    log << kLogHeader << '\n';
    for (const auto& r : prior_rows) log << r << '\n';
  }
  std::ofstream log(res.log, std::ios::app);
  std::ofstream quality(opt.out_dir / "data_quality.csv", opt.resume ? std::ios::app : std::ios::trunc);
  if (!opt.resume) quality << "epoch,end_step,gt_boxes,unmatched\n";

  const nlohmann::json meta{{"train", to_json(cfg)}, {"dataset_hash", opt.dataset_hash}};
  auto save = [&](const fs::path& path) {
    log.flush();
    save_checkpoint(path, to_checkpoint(res.state, meta));
  };

  const std::int64_t epoch_len =
      std::max<std::int64_t>(1, (static_cast<std::int64_t>(ds.labeled.size()) + cfg.det_batch - 1) / cfg.det_batch);
  int epoch_gt = 0, epoch_unmatched = 0;
  auto& st = res.state;
  while (st.step < cfg.schedule.total) {
    if (opt.stop_after && st.step >= *opt.stop_after) return res;
    const std::int64_t step = st.step;
    if (step == 0 || cfg.schedule.stage_at(step) != cfg.schedule.stage_at(step - 1)) {
      event("stage " + to_string(cfg.schedule.stage_at(step)) + " from step " + std::to_string(step));
    }
    const StepOutcome o = train_step(st, net, cfg, make_batch(ds, cfg, step));
    log << format_log_row(step, o) << '\n';
    epoch_gt += o.gt_boxes;
    epoch_unmatched += o.unmatched;
    if (st.step % epoch_len == 0) {
      quality << st.step / epoch_len << ',' << st.step << ',' << epoch_gt << ',' << epoch_unmatched << '\n';
      epoch_gt = epoch_unmatched = 0;
    }
    if (st.step == cfg.schedule.burn_in) save(res.burnin);
    if (st.step == cfg.schedule.mutual) save(res.mutual);
    if (st.step == cfg.schedule.total) save(res.final);
    if (st.step % cfg.checkpoint_every == 0) save(opt.out_dir / "checkpoint_last.ckpt");
  }
  log.flush();
  res.completed = true;
  event("finished at step " + std::to_string(st.step));
  return res;
}

}  // namespace enjoint
