#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "enjoint/commands.hpp"
#include "enjoint/runtime.hpp"

namespace {

std::vector<std::filesystem::path> split_paths(const std::vector<std::string>& args) {
  std::vector<std::filesystem::path> out;
  for (const auto& a : args) {
    std::stringstream ss(a);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.emplace_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  enjoint::tune_allocator();
  CLI::App app{"Joint underwater enhancement and detection toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", enjoint::kToolVersion);

  enjoint::SynthArgs synth;
  std::uint64_t synth_seed = 0;
  auto* c_synth = app.add_subcommand("synth", "Generate the synthetic datasets");
  c_synth->add_option("--config", synth.config, "Config JSON")->required()->check(CLI::ExistingFile);
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  auto* seed_opt = c_synth->add_option("--seed", synth_seed, "Override the dataset seed");
  c_synth->add_flag("--force", synth.force, "Write into a non-empty directory");

  enjoint::TrainArgs train;
  std::string resume;
  std::int64_t stop_after = -1;
  auto* c_train = app.add_subcommand("train", "Run the three-stage training loop");
  c_train->add_option("--config", train.config, "Config JSON")->required()->check(CLI::ExistingFile);
  c_train->add_option("--data", train.data, "Dataset directory from synth")->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--out", train.out, "Output directory")->required();
  c_train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  c_train->add_option("--stop-after", stop_after, "Stop once this many steps are done");
  c_train->add_flag("--force", train.force, "Write into a non-empty directory");

  enjoint::InferArgs infer;
  std::string infer_config;
  auto* c_infer = app.add_subcommand("infer", "Detect and/or enhance a directory of PPM images");
  c_infer->add_option("--checkpoint", infer.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c_infer->add_option("--mode", infer.mode, "det, enh or dual")->check(CLI::IsMember({"det", "enh", "dual"}));
  c_infer->add_option("--images", infer.images, "Directory of .ppm images")->required()->check(CLI::ExistingDirectory);
  c_infer->add_option("--out", infer.out, "Output directory")->required();
  c_infer->add_option("--config", infer_config, "Config JSON to check the input size against")->check(CLI::ExistingFile);
  c_infer->add_option("--conf", infer.conf, "Confidence threshold")->check(CLI::Range(0.0, 1.0));
  c_infer->add_option("--nms", infer.nms, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));
  c_infer->add_flag("--force", infer.force, "Write into a non-empty directory");

  enjoint::EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on the eval splits");
  c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", eval.data, "Dataset directory from synth")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--out", eval.out, "Output directory")->required();
  c_eval->add_flag("--oracle-detections", eval.oracle, "Score ground truth as detections");
  c_eval->add_flag("--force", eval.force, "Write into a non-empty directory");

  enjoint::BenchArgs bench;
  std::string bench_ckpt, bench_config;
  auto* c_bench = app.add_subcommand("bench", "Time forward passes and report model size");
  c_bench->add_option("--checkpoint", bench_ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  c_bench->add_option("--config", bench_config, "Config JSON (used without a checkpoint)")->check(CLI::ExistingFile);
  c_bench->add_option("--mode", bench.mode, "det, enh, dual or all")->check(CLI::IsMember({"det", "enh", "dual", "all"}));
  c_bench->add_option("--iters", bench.iters, "Timed iterations (>= 10)");
  c_bench->add_option("--batch", bench.batch, "Images per forward");
  c_bench->add_option("--out", bench.out, "Output directory")->required();
  c_bench->add_flag("--force", bench.force, "Write into a non-empty directory");

  enjoint::EmbedArgs embed;
  std::vector<std::string> embed_ckpts;
  auto* c_embed = app.add_subcommand("embed", "Backbone embedding gaps and 2-D projections");
  c_embed->add_option("--checkpoints", embed_ckpts, "Checkpoint files (comma separated or repeated)")->required();
  c_embed->add_option("--data", embed.data, "Dataset directory from synth")->required()->check(CLI::ExistingDirectory);
  c_embed->add_option("--out", embed.out, "Output directory")->required();
  c_embed->add_option("--per-type", embed.per_type, "Images per water type (0: all)");
  c_embed->add_flag("--force", embed.force, "Write into a non-empty directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*c_synth) {
      if (seed_opt->count()) synth.seed = synth_seed;
      return enjoint::cmd_synth(synth, std::cout);
    }
    if (*c_train) {
      if (!resume.empty()) train.resume = resume;
      if (stop_after >= 0) train.stop_after = stop_after;
      return enjoint::cmd_train(train, std::cout);
    }
    if (*c_infer) {
      if (!infer_config.empty()) infer.config = infer_config;
      return enjoint::cmd_infer(infer, std::cout);
    }
    if (*c_eval) return enjoint::cmd_eval(eval, std::cout);
    if (*c_bench) {
      if (!bench_ckpt.empty()) bench.checkpoint = bench_ckpt;
      if (!bench_config.empty()) bench.config = bench_config;
      return enjoint::cmd_bench(bench, std::cout);
    }
    if (*c_embed) {
      for (const auto& p : split_paths(embed_ckpts))
        if (!std::filesystem::is_regular_file(p)) throw enjoint::UsageError("no such checkpoint: " + p.string());
      embed.checkpoints = split_paths(embed_ckpts);
      return enjoint::cmd_embed(embed, std::cout);
    }
  } catch (const enjoint::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
