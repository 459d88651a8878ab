#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <limits>

#include "enjoint/checkpoint.hpp"
#include "enjoint/trainer.hpp"
#include "support.hpp"

using namespace enjoint;

namespace {

NetworkConfig small_network() {
  NetworkConfig c;
  c.input_size = 32;
  c.stem_channels = 4;
  c.stage_channels = {4, 6, 8};
  c.det_strides = {8, 16};
  c.anchors = {{{6, 6}, {9, 7}}, {{10, 10}, {14, 12}}};
  c.class_count = 2;
  c.uie_channels = {6, 4, 2, 2};
  c.validate();
  return c;
}

DatasetConfig small_data() {
  DatasetConfig c;
  c.scene.image_size = 32;
  c.scene.class_count = 2;
  c.scene.min_object_size = 6;
  c.scene.max_object_size = 12;
  c.sizes = {6, 6, 2};
  c.seed = 5;
  return c;
}

TrainConfig small_train() {
  TrainConfig c;
  c.schedule = {4, 7, 10};
  c.det_batch = 2;
  c.enh_batch = 2;
  c.checkpoint_every = 3;
  return c;
}

const Datasets& datasets() {
  static const Datasets ds = build_datasets(small_data());
  return ds;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)) == 0;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& row) {
  std::vector<std::string> out;
  std::string cell;
  for (char ch : row) {
    if (ch == ',') {
      out.push_back(cell);
      cell.clear();
    } else {
      cell += ch;
    }
  }
  out.push_back(cell);
  return out;
}

// Straightforward restatement of the schedule for table comparisons.
std::set<std::string> expected_losses(std::int64_t step, std::int64_t nb, std::int64_t nm) {
  std::set<std::string> s{"enh", "det_r"};
  if (step >= nb) s.insert({"uns", "det_e"});
  if (step >= nm) s.insert("da");
  return s;
}

double expected_lr(std::int64_t step, std::int64_t nb, std::int64_t nm, double base, double decay) {
  if (step < nb) return base;
  if (step < nm) return base * decay;
  return base * decay * decay;
}

RunOptions run_in(const std::filesystem::path& dir) {
  RunOptions o;
  o.out_dir = dir;
  return o;
}

}  // namespace

TEST(Schedule, DeskAndFullScaleTablesExhaustive) {
  for (const auto& sched : {StageSchedule::desk(), StageSchedule::full_scale()}) {
    TrainConfig cfg;
    cfg.schedule = sched;
    for (std::int64_t step = 0; step < sched.total; ++step) {
      ASSERT_EQ(active_losses(step, sched), expected_losses(step, sched.burn_in, sched.mutual)) << "step " << step;
      ASSERT_EQ(lr_at(step, cfg), expected_lr(step, sched.burn_in, sched.mutual, 0.01, 0.1)) << "step " << step;
    }
    EXPECT_THROW(active_losses(-1, sched), std::out_of_range);
    EXPECT_THROW(active_losses(sched.total, sched), std::out_of_range);
  }
  EXPECT_EQ(StageSchedule::full_scale(), (StageSchedule{80000, 120000, 150000}));
  EXPECT_EQ(StageSchedule::desk(), (StageSchedule{1500, 2400, 3000}));
}

TEST(Schedule, Validation) {
  EXPECT_NO_THROW((StageSchedule{5, 10, 10}.validate()));
  EXPECT_EQ(StageSchedule({5, 10, 10}).stage_at(9), Stage::MutualLearning);
  EXPECT_THROW((StageSchedule{0, 10, 20}.validate()), std::invalid_argument);
  EXPECT_THROW((StageSchedule{10, 10, 20}.validate()), std::invalid_argument);
  EXPECT_THROW((StageSchedule{5, 21, 20}.validate()), std::invalid_argument);
}

TEST(TrainConfig, JsonRoundTripAndRejects) {
  auto c = small_train();
  c.weights.da = 0.5;
  c.strong.blur = false;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"base_lr", -1}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"det_batch", 1}}), std::invalid_argument);
}

TEST(MakeBatch, DeterministicPerStep) {
  const auto cfg = small_train();
  const auto a = make_batch(datasets(), cfg, 3);
  const auto b = make_batch(datasets(), cfg, 3);
  ASSERT_EQ(a.enh.size(), 2u);
  ASSERT_EQ(a.det.size(), 2u);
  for (std::size_t i = 0; i < a.det.size(); ++i) {
    EXPECT_EQ(a.det[i].image, b.det[i].image);
    EXPECT_EQ(a.det[i].boxes, b.det[i].boxes);
    EXPECT_EQ(a.enh[i].degraded, b.enh[i].degraded);
  }
  EXPECT_FALSE(make_batch(datasets(), cfg, 4).det[0].image == a.det[0].image);
}

TEST(TrainStep, ReportsActiveTermsAndTotal) {
  const auto net_cfg = small_network();
  const Network<float> net(net_cfg);
  auto cfg = small_train();
  auto st = initial_state(net_cfg, cfg);
  const auto before = da_path_counter().load();
  for (std::int64_t step = 0; step < cfg.schedule.total; ++step) {
    const auto o = train_step(st, net, cfg, make_batch(datasets(), cfg, step));
    const auto active = active_losses(step, cfg.schedule);
    EXPECT_EQ(o.report.enh.has_value(), active.count("enh") == 1);
    EXPECT_EQ(o.report.uns.has_value(), active.count("uns") == 1);
    EXPECT_EQ(o.report.det_e.has_value(), active.count("det_e") == 1);
    EXPECT_EQ(o.report.da.has_value(), active.count("da") == 1);
    EXPECT_NEAR(o.report.total, o.report.sum_present(), 1e-5 * std::max(1.0, std::abs(o.report.total)));
    EXPECT_TRUE(std::isfinite(o.report.total));
    EXPECT_EQ(o.lr, lr_at(step, cfg));
    EXPECT_EQ(st.step, step + 1);
    // The domain-adaptation path must stay cold until its stage begins.
    const auto calls = da_path_counter().load() - before;
    EXPECT_EQ(calls, static_cast<std::uint64_t>(std::max<std::int64_t>(0, step + 1 - cfg.schedule.mutual)));
  }
}

TEST(TrainStep, LossWeightsScaleTheTotal) {
  const auto net_cfg = small_network();
  const Network<float> net(net_cfg);
  auto cfg = small_train();
  const auto batch = make_batch(datasets(), cfg, 0);
  auto a = initial_state(net_cfg, cfg);
  const auto ra = train_step(a, net, cfg, batch).report;
  cfg.weights.enh = 2;
  cfg.weights.det_r = 0.5;
  auto b = initial_state(net_cfg, cfg);
  const auto rb = train_step(b, net, cfg, batch).report;
  EXPECT_EQ(*ra.enh, *rb.enh);
  EXPECT_NEAR(rb.total, 2 * *ra.enh + 0.5 * *ra.det_r, 1e-5);
}

TEST(TrainStep, NonFiniteLeavesStateUntouched) {
  const auto net_cfg = small_network();
  const Network<float> net(net_cfg);
  const auto cfg = small_train();
  auto st = initial_state(net_cfg, cfg);
  st.params.vars()[0].mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
  const auto snapshot = st.params.clone();
  EXPECT_THROW(train_step(st, net, cfg, make_batch(datasets(), cfg, 0)), NumericError);
  EXPECT_EQ(st.step, 0);
  for (std::size_t i = 1; i < st.params.size(); ++i) {
    EXPECT_TRUE(same_bits(st.params.vars()[i].value(), snapshot.vars()[i].value()));
    EXPECT_FALSE(st.params.vars()[i].has_grad());
  }
  for (const auto& v : st.velocity)
    for (float x : v.data()) ASSERT_EQ(x, 0.0f);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto net_cfg = small_network();
  auto st = initial_state(net_cfg, small_train());
  st.step = 42;
  st.velocity[1] = testing_support::random_tensor<float>(st.velocity[1].shape(), 3);
  const auto dir = testing_support::scratch_dir("ckpt_roundtrip");
  const auto path = dir / "a.ckpt";
  save_checkpoint(path, to_checkpoint(st, {{"note", "x"}}));
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.step, 42);
  EXPECT_EQ(ck.meta.at("note"), "x");
  EXPECT_EQ(to_json(ck.network), to_json(net_cfg));
  ASSERT_EQ(ck.params.names(), st.params.names());
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    EXPECT_TRUE(same_bits(ck.params.vars()[i].value(), st.params.vars()[i].value()));
    EXPECT_TRUE(same_bits(ck.velocity[i], st.velocity[i]));
  }
  EXPECT_EQ(serialize_checkpoint(ck), serialize_checkpoint(to_checkpoint(st, {{"note", "x"}})));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = testing_support::scratch_dir("ckpt_corrupt");
  const auto st = initial_state(small_network(), small_train());
  const auto bytes = serialize_checkpoint(to_checkpoint(st, {}));
  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream(dir / name, std::ios::binary) << b;
    return dir / name;
  };
  EXPECT_THROW(load_checkpoint(write("magic", "NOTACKPT" + bytes.substr(8))), std::runtime_error);
  EXPECT_THROW(load_checkpoint(write("short", bytes.substr(0, bytes.size() - 4))), std::runtime_error);
  EXPECT_THROW(load_checkpoint(dir / "missing"), std::runtime_error);
  auto other = small_network();
  other.stem_channels = 6;
  auto ck = load_checkpoint(write("ok", bytes));
  ck.network = other;
  EXPECT_THROW(from_checkpoint(ck), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(RunTraining, DeterministicLogsAndStageCheckpoints) {
  const auto net_cfg = small_network();
  const auto cfg = small_train();
  const auto root = testing_support::scratch_dir("train_det");
  const RunOptions a = run_in(root / "a"), b = run_in(root / "b");
  const auto ra = run_training(net_cfg, cfg, datasets(), a);
  const auto rb = run_training(net_cfg, cfg, datasets(), b);
  ASSERT_TRUE(ra.completed);
  for (const auto& which : {"burnin", "mutual", "final"}) {
    EXPECT_EQ(hash_file(stage_checkpoint_path(a.out_dir, which)), hash_file(stage_checkpoint_path(b.out_dir, which)));
  }
  EXPECT_EQ(load_checkpoint(ra.burnin).step, 4);
  EXPECT_EQ(load_checkpoint(ra.mutual).step, 7);
  EXPECT_EQ(load_checkpoint(ra.final).step, 10);

  const auto lines = read_lines(ra.log);
  ASSERT_EQ(lines.size(), 11u);
  EXPECT_EQ(lines[0], kLogHeader);
  EXPECT_EQ(read_lines(rb.log), lines);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv(lines[i]);
    ASSERT_EQ(cells.size(), 9u);
    const auto step = static_cast<std::int64_t>(i - 1);
    EXPECT_EQ(std::stoll(cells[0]), step);
    EXPECT_EQ(cells[1], to_string(cfg.schedule.stage_at(step)));
    const auto active = active_losses(step, cfg.schedule);
    const std::array<std::string, 5> names{"enh", "det_r", "uns", "det_e", "da"};
    for (std::size_t k = 0; k < names.size(); ++k) EXPECT_EQ(cells[2 + k].empty(), active.count(names[k]) == 0) << lines[i];
  }
  std::filesystem::remove_all(root);
}

TEST(RunTraining, ResumeReproducesStraightRun) {
  const auto net_cfg = small_network();
  const auto cfg = small_train();
  const auto root = testing_support::scratch_dir("train_resume");
  auto straight = run_in(root / "straight");
  const auto rs = run_training(net_cfg, cfg, datasets(), straight);

  auto first = run_in(root / "first");
  first.stop_after = 5;
  const auto partial = run_training(net_cfg, cfg, datasets(), first);
  EXPECT_FALSE(partial.completed);
  EXPECT_EQ(partial.state.step, 5);

  // Resume from the burn-in checkpoint into a fresh directory.
  auto second = run_in(root / "second");
  second.resume = partial.burnin;
  const auto rr = run_training(net_cfg, cfg, datasets(), second);
  ASSERT_TRUE(rr.completed);
  EXPECT_EQ(hash_file(rr.final), hash_file(rs.final));
  EXPECT_EQ(hash_file(rr.mutual), hash_file(rs.mutual));
  EXPECT_EQ(read_lines(rr.log), read_lines(rs.log));

  auto reseeded = cfg;
  reseeded.seed = 99;
  auto third = run_in(root / "third");
  third.resume = partial.burnin;
  EXPECT_THROW(run_training(net_cfg, reseeded, datasets(), third), std::runtime_error);
  std::filesystem::remove_all(root);
}
