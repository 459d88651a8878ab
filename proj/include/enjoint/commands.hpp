#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "enjoint/aquasynth.hpp"
#include "enjoint/checkpoint.hpp"
#include "enjoint/embedviz.hpp"
#include "enjoint/eval.hpp"
#include "enjoint/model.hpp"
#include "enjoint/trainer.hpp"

namespace enjoint {

inline constexpr const char* kToolVersion = "0.1.0";

/// Bad invocation; the CLI maps it to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Top-level config file: optional "dataset", "network" and "train" sections
/// plus an optional "expected_dataset_hash".
struct ProjectConfig {
  DatasetConfig dataset;
  NetworkConfig network;
  TrainConfig train;
  std::optional<std::string> expected_dataset_hash;
  nlohmann::json raw = nlohmann::json::object();
};

inline ProjectConfig parse_project_config(const nlohmann::json& j) {
  ProjectConfig c;
  c.raw = j;
  if (j.contains("dataset")) c.dataset = dataset_config_from_json(j.at("dataset"));
  if (j.contains("network")) c.network = network_config_from_json(j.at("network"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("expected_dataset_hash")) c.expected_dataset_hash = j.at("expected_dataset_hash").get<std::string>();
  c.network.validate();
  if (c.network.input_size != c.dataset.scene.image_size) {
    throw std::invalid_argument("config: network.input_size differs from dataset.scene.image_size");
  }
  if (c.network.class_count != c.dataset.scene.class_count) {
    throw std::invalid_argument("config: network.class_count differs from dataset.scene.class_count");
  }
  return c;
}

inline ProjectConfig load_project_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_project_config(j);
}

inline std::string json_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  Fnv1a h;
  h.update(s.data(), s.size());
  return hash_hex(h.digest());
}

/// Creates `dir`; an existing non-empty directory is refused unless `force`.
inline void prepare_out_dir(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw std::runtime_error("output directory " + dir.string() + " is not empty (use --force)");
  }
  fs::create_directories(dir);
}

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string dataset_hash;
  std::vector<std::string> checkpoint_ids;
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0;
};

inline void write_run_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  const nlohmann::json j{{"command", m.command},
                         {"config_hash", m.config_hash},
                         {"dataset_hash", m.dataset_hash},
                         {"checkpoint_ids", m.checkpoint_ids},
                         {"tool_version", kToolVersion},
                         {"wall_clock_seconds", m.wall_clock_seconds},
                         {"seed", m.seed}};
  write_file_atomic(dir / "run_manifest.json", j.dump(2) + "\n");
}

inline void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::filesystem::path config, out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& log) {
  Stopwatch sw;
  ProjectConfig pc = load_project_config(a.config);
  if (a.seed) pc.dataset.seed = *a.seed;
  prepare_out_dir(a.out, a.force);
  const Datasets ds = build_datasets(pc.dataset);
  export_datasets(ds, pc.dataset, a.out);
  const std::string hash = hash_hex(ds.content_hash());
  log << "wrote " << ds.paired.size() << " paired, " << ds.labeled.size() << " labeled, " << ds.eval.size()
      << " eval splits to " << a.out.string() << " (content hash " << hash << ")\n";
  write_run_manifest(a.out, {"synth", json_hash(to_json(pc.dataset)), hash, {}, pc.dataset.seed, sw.seconds()});
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::filesystem::path config, data, out;
  std::optional<std::filesystem::path> resume;
  std::optional<std::int64_t> stop_after;
  bool force = false;
};

inline int cmd_train(const TrainArgs& a, std::ostream& log) {
  Stopwatch sw;
  const ProjectConfig pc = load_project_config(a.config);
  const LoadedDatasets loaded = load_datasets(a.data);
  if (pc.expected_dataset_hash && *pc.expected_dataset_hash != loaded.manifest_hash) {
    throw std::runtime_error("dataset hash " + loaded.manifest_hash + " does not match the expected " + *pc.expected_dataset_hash);
  }
  if (loaded.config.scene.image_size != pc.network.input_size) throw std::runtime_error("dataset image size differs from network input size");
  if (!a.resume) prepare_out_dir(a.out, a.force);
  RunOptions opt;
  opt.out_dir = a.out;
  opt.resume = a.resume;
  opt.stop_after = a.stop_after;
  opt.dataset_hash = loaded.manifest_hash;
  opt.on_event = [&log](const std::string& m) { log << m << '\n' << std::flush; };
  const TrainResult r = run_training(pc.network, pc.train, loaded.data, opt);
  std::vector<std::string> ids;
  for (const auto& p : {r.burnin, r.mutual, r.final})
    if (std::filesystem::exists(p)) ids.push_back(p.filename().string() + ":" + hash_file(p));
  write_run_manifest(a.out, {"train", json_hash(pc.raw), loaded.manifest_hash, ids, pc.train.seed, sw.seconds()});
  return 0;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::filesystem::path checkpoint, images, out;
  std::optional<std::filesystem::path> config;
  std::string mode = "dual";
  double conf = 0.25, nms = 0.45;
  bool force = false;
};

inline std::vector<std::filesystem::path> list_ppm(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> v;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") v.push_back(e.path());
  std::sort(v.begin(), v.end());
  return v;
}

inline nlohmann::json detections_json(const std::string& image, const std::vector<Detection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dets) {
    arr.push_back({{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}, {"class", d.class_id}, {"confidence", d.confidence}});
  }
  return {{"image", image}, {"detections", arr}};
}

inline int cmd_infer(const InferArgs& a, std::ostream& log) {
  Stopwatch sw;
  Mode mode;
  try {
    mode = mode_from_string(a.mode);
  } catch (const std::exception&) {
    throw UsageError("--mode must be det, enh or dual");
  }
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  check_params_match(ck.network, ck.params);
  if (a.config) {
    const ProjectConfig pc = load_project_config(*a.config);
    if (pc.network.input_size != ck.network.input_size) {
      throw std::runtime_error("checkpoint input size " + std::to_string(ck.network.input_size) + " differs from config input size " +
                               std::to_string(pc.network.input_size));
    }
  }
  const auto files = list_ppm(a.images);
  std::vector<Image> images;
  for (const auto& f : files) {
    images.push_back(read_ppm(f));
    if (images.back().height() != ck.network.input_size || images.back().width() != ck.network.input_size) {
      throw std::runtime_error(f.string() + " is not " + std::to_string(ck.network.input_size) + "x" +
                               std::to_string(ck.network.input_size));
    }
  }
  prepare_out_dir(a.out, a.force);
  DecodeParams dp;
  dp.conf_thresh = a.conf;
  dp.nms_iou = a.nms;
  const Network<float> net(ck.network);
  InferenceResult r;
  if (!images.empty()) r = forward(net, ck.params, images, mode, dp);

  if (mode != Mode::Enhance) {
    nlohmann::json all = nlohmann::json::array();
    for (std::size_t i = 0; i < files.size(); ++i) all.push_back(detections_json(files[i].filename().string(), (*r.detections)[i]));
    write_json_atomic(a.out / "detections.json", all);
  }
  if (mode != Mode::Detect) {
    std::filesystem::create_directories(a.out / "enhanced");
    for (std::size_t i = 0; i < files.size(); ++i) write_ppm(a.out / "enhanced" / files[i].filename(), (*r.enhanced)[i]);
  }
  log << "processed " << images.size() << " images in " << to_string(mode) << " mode\n";
  write_run_manifest(a.out, {"infer", json_hash(to_json(ck.network)), "", {hash_file(a.checkpoint)}, 0, sw.seconds()});
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::filesystem::path checkpoint, data, out;
  bool oracle = false;
  bool force = false;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& log) {
  Stopwatch sw;
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  check_params_match(ck.network, ck.params);
  const LoadedDatasets loaded = load_datasets(a.data);
  if (loaded.data.eval.empty()) throw std::runtime_error("dataset has no eval splits");
  prepare_out_dir(a.out, a.force);
  const Network<float> net(ck.network);
  std::vector<SplitReport> reports;
  for (const auto& split : loaded.data.eval) {
    reports.push_back(evaluate_split(net, ck.params, split, a.oracle));
    log << split.name << ": map50 " << reports.back().ap.map50 << " psnr " << reports.back().enhancement->psnr_enhanced << "\n";
  }
  auto report = evaluation_report(reports);
  report["checkpoint"] = hash_file(a.checkpoint);
  report["step"] = ck.step;
  report["oracle_detections"] = a.oracle;
  write_json_atomic(a.out / "metrics.json", report);
  write_run_manifest(a.out, {"eval", json_hash(to_json(ck.network)), loaded.manifest_hash, {hash_file(a.checkpoint)}, 0, sw.seconds()});
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::optional<std::filesystem::path> checkpoint, config;
  std::filesystem::path out;
  std::string mode = "all";
  int iters = 50;
  int batch = 1;
  bool force = false;
};

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Throws unless params(dual) = params(det) + params(enh) - params(backbone)
/// and the parameter registry agrees with the analytic count.
inline void check_params_identity(const NetworkConfig& cfg, const ParamStore<float>& params) {
  const auto det = count_params_flops(cfg, Mode::Detect);
  const auto enh = count_params_flops(cfg, Mode::Enhance);
  const auto dual = count_params_flops(cfg, Mode::Dual);
  const auto bb = count_part(cfg, "backbone");
  if (dual.params != det.params + enh.params - bb.params) throw std::logic_error("params identity violated");
  if (params.count() != dual.params) throw std::logic_error("registered parameter count differs from the analytic count");
  if (params.count("backbone.") + params.count("det.") != det.params) throw std::logic_error("detect-mode parameter recount differs");
}

inline int cmd_bench(const BenchArgs& a, std::ostream& log) {
  if (a.iters < 10) throw UsageError("--iters must be >= 10");
  if (a.batch < 1) throw UsageError("--batch must be >= 1");
  std::vector<Mode> modes;
  if (a.mode == "all") {
    modes = {Mode::Detect, Mode::Enhance, Mode::Dual};
  } else {
    try {
      modes = {mode_from_string(a.mode)};
    } catch (const std::exception&) {
      throw UsageError("--mode must be det, enh, dual or all");
    }
  }
  Stopwatch sw;
  NetworkConfig cfg;
  ParamStore<float> params;
  std::vector<std::string> ids;
  if (a.checkpoint) {
    Checkpoint ck = load_checkpoint(*a.checkpoint);
    cfg = ck.network;
    params = std::move(ck.params);
    ids.push_back(hash_file(*a.checkpoint));
  } else {
    if (a.config) cfg = load_project_config(*a.config).network;
    params = init_weights<float>(cfg, 1).params;
  }
  check_params_match(cfg, params);
  check_params_identity(cfg, params);
  prepare_out_dir(a.out, a.force);

  const Network<float> net(cfg);
  std::vector<Image> images;
  const SceneConfig scene{cfg.input_size, 1, 4, cfg.class_count, std::max(4, cfg.input_size / 8), std::max(4, cfg.input_size / 3)};
  for (int i = 0; i < a.batch; ++i) images.push_back(render_scene(scene, static_cast<std::uint64_t>(i)).image);

  nlohmann::json report{{"input_size", cfg.input_size}, {"batch", a.batch}, {"iters", a.iters}, {"modes", nlohmann::json::object()}};
  for (Mode m : modes) {
    for (int w = 0; w < 2; ++w) forward(net, params, images, m);
    std::vector<double> ms;
    for (int i = 0; i < a.iters; ++i) {
      Stopwatch t;
      forward(net, params, images, m);
      ms.push_back(t.seconds() * 1e3);
    }
    const Cost c = count_params_flops(cfg, m);
    const double median = percentile(ms, 0.5);
    report["modes"][to_string(m)] = {{"median_ms", median},
                                     {"p95_ms", percentile(ms, 0.95)},
                                     {"fps", 1e3 * a.batch / median},
                                     {"params", c.params},
                                     {"mult_adds", c.mult_adds}};
    log << to_string(m) << ": median " << median << " ms, params " << c.params << ", mult-adds " << c.mult_adds << "\n";
  }
  const auto det = count_params_flops(cfg, Mode::Detect), enh = count_params_flops(cfg, Mode::Enhance),
             dual = count_params_flops(cfg, Mode::Dual);
  report["params_identity"] = dual.params == det.params + enh.params - count_part(cfg, "backbone").params;
  report["dual_mult_adds_below_sum"] = dual.mult_adds < det.mult_adds + enh.mult_adds;
  write_json_atomic(a.out / "bench.json", report);
  write_run_manifest(a.out, {"bench", json_hash(to_json(cfg)), "", ids, 0, sw.seconds()});
  return 0;
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path data, out;
  int per_type = 0;  // 0: every eval image
  bool force = false;
};

inline const std::vector<std::pair<std::string, WaterType>>& embed_types() {
  static const std::vector<std::pair<std::string, WaterType>> t{
      {"greenish", WaterType::Greenish}, {"bluish", WaterType::Bluish}, {"turbid", WaterType::Turbid}};
  return t;
}

inline int cmd_embed(const EmbedArgs& a, std::ostream& log) {
  if (a.checkpoints.empty()) throw UsageError("at least one checkpoint is required");
  Stopwatch sw;
  const LoadedDatasets loaded = load_datasets(a.data);
  prepare_out_dir(a.out, a.force);
  nlohmann::json gaps = nlohmann::json::object();
  std::ofstream csv(a.out / "projections.csv");
  csv << "tag,checkpoint,x,y\n";
  std::vector<std::string> ids;
  std::vector<std::string> names;
  for (const auto& path : a.checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    check_params_match(ck.network, ck.params);
    ids.push_back(hash_file(path));
    const std::string name = path.stem().string();
    names.push_back(name);
    const Network<float> net(ck.network);
    std::vector<EmbeddingSet> sets;
    for (const auto& [split, water] : embed_types()) {
      auto images = split_images(loaded.data.split(split));
      if (a.per_type > 0 && images.size() > static_cast<std::size_t>(a.per_type)) images.resize(static_cast<std::size_t>(a.per_type));
      sets.push_back(collect_embeddings(net, ck.params, images, water, name));
    }
    nlohmann::json m = nlohmann::json::object();
    for (std::size_t i = 0; i < sets.size(); ++i)
      for (std::size_t j = 0; j < sets.size(); ++j) m[to_string(sets[i].tag)][to_string(sets[j].tag)] = domain_gap(sets[i], sets[j]);
    gaps[name] = m;
    const Projection p = pca_project(stack_rows(sets), 2);
    write_projection_csv(csv, sets, p.coords);
    log << name << ": embeddings for " << sets.size() << " water types\n";
  }
  nlohmann::json report{{"checkpoints", names}, {"gaps", gaps}};
  if (names.size() >= 2) {
    // Cross-type gaps of the last checkpoint against the first.
    nlohmann::json shrink = nlohmann::json::object();
    const auto& first = gaps[names.front()];
    const auto& last = gaps[names.back()];
    const auto& types = embed_types();
    for (std::size_t i = 0; i < types.size(); ++i)
      for (std::size_t j = i + 1; j < types.size(); ++j) {
        const std::string a_name = to_string(types[i].second), b_name = to_string(types[j].second);
        shrink[a_name + "-" + b_name] = last[a_name][b_name].get<double>() < first[a_name][b_name].get<double>();
      }
    report["last_below_first"] = shrink;
  }
  csv.close();
  write_json_atomic(a.out / "gaps.json", report);
  write_run_manifest(a.out, {"embed", json_hash(report["checkpoints"]), loaded.manifest_hash, ids, 0, sw.seconds()});
  return 0;
}

}  // namespace enjoint
