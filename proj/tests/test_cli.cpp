#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "enjoint/checkpoint.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(ENJOINT_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

const char* kConfig = R"({
  "dataset": {"scene": {"image_size": 32, "class_count": 2, "min_object_size": 6, "max_object_size": 12},
              "sizes": {"paired": 5, "labeled": 4, "eval_per_type": 3}, "seed": 9},
  "network": {"input_size": 32, "stem_channels": 4, "stage_channels": [4, 6, 8], "det_strides": [8, 16],
              "anchors": [[[6, 6], [9, 7]], [[10, 10], [14, 12]]], "class_count": 2, "uie_channels": [6, 4, 2, 2]},
  "train": {"schedule": {"burn_in": 2, "mutual": 3, "total": 4}, "det_batch": 2, "enh_batch": 2, "checkpoint_every": 2}
})";

// One synthesized dataset and one short training run shared by the suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(testing_support::scratch_dir("cli"));
    std::ofstream(*root_ / "config.json") << kConfig;
    ASSERT_EQ(run("synth --config " + (*root_ / "config.json").string() + " --out " + (*root_ / "data").string()), 0);
    ASSERT_EQ(run("train --config " + (*root_ / "config.json").string() + " --data " + (*root_ / "data").string() + " --out " +
                  (*root_ / "run").string()),
              0);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path root() { return *root_; }
  static std::string config() { return (root() / "config.json").string(); }
  static std::string data() { return (root() / "data").string(); }
  static std::string final_ckpt() { return (root() / "run" / "checkpoint_final.ckpt").string(); }

 private:
  static fs::path* root_;
};

fs::path* Cli::root_ = nullptr;

}  // namespace

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("synth --out " + (root() / "x").string()), 2);
  EXPECT_EQ(run("synth --config " + (root() / "missing.json").string() + " --out " + (root() / "x").string()), 2);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("infer --checkpoint " + final_ckpt() + " --mode both --images " + data() + " --out " + (root() / "x").string()), 2);
}

TEST_F(Cli, SynthIsDeterministicAndSized) {
  const auto out = root() / "synth_again";
  ASSERT_EQ(run("synth --config " + config() + " --out " + out.string()), 0);
  EXPECT_EQ(read_json(out / "run_manifest.json")["dataset_hash"], read_json(root() / "data" / "run_manifest.json")["dataset_hash"]);
  EXPECT_EQ(count_files(out / "paired" / "degraded"), 5u);
  EXPECT_EQ(count_files(out / "paired" / "clear"), 5u);
  EXPECT_EQ(count_files(out / "labeled" / "images"), 4u);
  EXPECT_EQ(count_files(out / "unpaired"), 4u);
  for (const char* split : {"eval_home", "eval_greenish", "eval_bluish", "eval_turbid"}) EXPECT_EQ(count_files(out / split / "images"), 3u);
  EXPECT_NE(run("synth --config " + config() + " --out " + out.string()), 0);
  EXPECT_EQ(run("synth --config " + config() + " --out " + out.string() + " --force --seed 10"), 0);
  EXPECT_NE(read_json(out / "run_manifest.json")["dataset_hash"], read_json(root() / "data" / "run_manifest.json")["dataset_hash"]);
}

TEST_F(Cli, TrainWritesStageCheckpointsAndLog) {
  const auto run_dir = root() / "run";
  for (const char* f : {"checkpoint_burnin.ckpt", "checkpoint_mutual.ckpt", "checkpoint_final.ckpt", "train_log.csv", "run_manifest.json"})
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  std::ifstream log(run_dir / "train_log.csv");
  int lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  EXPECT_EQ(lines, 1 + 4);
  EXPECT_EQ(read_json(run_dir / "run_manifest.json")["checkpoint_ids"].size(), 3u);

  const auto resumed = root() / "resumed";
  ASSERT_EQ(run("train --config " + config() + " --data " + data() + " --out " + resumed.string() + " --resume " +
                (run_dir / "checkpoint_burnin.ckpt").string()),
            0);
  EXPECT_EQ(enjoint::hash_file(resumed / "checkpoint_final.ckpt"), enjoint::hash_file(run_dir / "checkpoint_final.ckpt"));
}

TEST_F(Cli, TrainRefusesDatasetHashMismatch) {
  auto cfg = nlohmann::json::parse(kConfig);
  cfg["expected_dataset_hash"] = "0000000000000000";
  const auto path = root() / "hash_config.json";
  std::ofstream(path) << cfg.dump();
  EXPECT_EQ(run("train --config " + path.string() + " --data " + data() + " --out " + (root() / "refused").string()), 1);
  EXPECT_FALSE(fs::exists(root() / "refused" / "checkpoint_final.ckpt"));
}

TEST_F(Cli, InferModesAgree) {
  const auto images = (root() / "data" / "eval_bluish" / "images").string();
  for (const char* mode : {"det", "enh", "dual"})
    ASSERT_EQ(run("infer --checkpoint " + final_ckpt() + " --mode " + mode + " --images " + images + " --out " + (root() / mode).string()), 0);
  EXPECT_TRUE(fs::exists(root() / "det" / "detections.json"));
  EXPECT_FALSE(fs::exists(root() / "det" / "enhanced"));
  EXPECT_FALSE(fs::exists(root() / "enh" / "detections.json"));
  EXPECT_EQ(read_bytes(root() / "dual" / "detections.json"), read_bytes(root() / "det" / "detections.json"));
  ASSERT_EQ(count_files(root() / "enh" / "enhanced"), 3u);
  for (const auto& e : fs::directory_iterator(root() / "enh" / "enhanced"))
    EXPECT_EQ(read_bytes(e.path()), read_bytes(root() / "dual" / "enhanced" / e.path().filename()));

  const auto empty = testing_support::scratch_dir("cli_empty_images");
  ASSERT_EQ(run("infer --checkpoint " + final_ckpt() + " --images " + empty.string() + " --out " + (root() / "empty_out").string()), 0);
  EXPECT_TRUE(read_json(root() / "empty_out" / "detections.json").empty());
  fs::remove_all(empty);
}

TEST_F(Cli, InferRejectsInputSizeMismatch) {
  auto cfg = nlohmann::json::parse(kConfig);
  cfg["network"]["input_size"] = 64;
  cfg["dataset"]["scene"]["image_size"] = 64;
  const auto path = root() / "big_config.json";
  std::ofstream(path) << cfg.dump();
  const auto images = (root() / "data" / "eval_home" / "images").string();
  EXPECT_EQ(run("infer --checkpoint " + final_ckpt() + " --config " + path.string() + " --images " + images + " --out " +
                (root() / "mismatch").string()),
            1);
}

TEST_F(Cli, EvalOracleDetectionsScorePerfect) {
  const auto out = root() / "eval_oracle";
  ASSERT_EQ(run("eval --checkpoint " + final_ckpt() + " --data " + data() + " --out " + out.string() + " --oracle-detections"), 0);
  const auto m = read_json(out / "metrics.json");
  for (const auto& [name, split] : m["splits"].items()) {
    EXPECT_DOUBLE_EQ(split["detection"]["map50"].get<double>(), 1.0) << name;
    EXPECT_DOUBLE_EQ(split["detection"]["map5095"].get<double>(), 1.0) << name;
  }
  EXPECT_TRUE(m["overall"].contains("enhancement"));

  const auto real = root() / "eval_real";
  ASSERT_EQ(run("eval --checkpoint " + final_ckpt() + " --data " + data() + " --out " + real.string()), 0);
  const auto r = read_json(real / "metrics.json");
  EXPECT_EQ(r["step"], 4);
  for (const auto& [name, split] : r["splits"].items()) {
    EXPECT_GE(split["detection"]["map50"].get<double>(), 0.0);
    EXPECT_LE(split["detection"]["map50"].get<double>(), 1.0);
  }
}

TEST_F(Cli, BenchReportsParamsIdentity) {
  const auto out = root() / "bench";
  ASSERT_EQ(run("bench --checkpoint " + final_ckpt() + " --iters 10 --out " + out.string()), 0);
  const auto b = read_json(out / "bench.json");
  EXPECT_TRUE(b["params_identity"].get<bool>());
  EXPECT_TRUE(b["dual_mult_adds_below_sum"].get<bool>());
  for (const char* m : {"det", "enh", "dual"}) EXPECT_GT(b["modes"][m]["median_ms"].get<double>(), 0.0) << m;
  EXPECT_EQ(run("bench --checkpoint " + final_ckpt() + " --iters 5 --out " + (root() / "bench5").string()), 2);
}

TEST_F(Cli, EmbedWritesGapsAndProjections) {
  const auto out = root() / "embed";
  const auto ckpts = (root() / "run" / "checkpoint_mutual.ckpt").string() + "," + final_ckpt();
  ASSERT_EQ(run("embed --checkpoints " + ckpts + " --data " + data() + " --out " + out.string()), 0);
  const auto g = read_json(out / "gaps.json");
  ASSERT_EQ(g["checkpoints"].size(), 2u);
  for (const auto& [ck, m] : g["gaps"].items())
    for (const char* a : {"greenish", "bluish", "turbid"}) {
      EXPECT_EQ(m[a][a].get<double>(), 0.0);
      for (const char* b : {"greenish", "bluish", "turbid"}) EXPECT_EQ(m[a][b], m[b][a]);
    }
  EXPECT_EQ(g["last_below_first"].size(), 3u);
  std::ifstream csv(out / "projections.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "tag,checkpoint,x,y");
  int rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 2 * 3 * 3);
}
