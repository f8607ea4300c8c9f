#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "poseroi/checkpoint.hpp"
#include "poseroi/commands.hpp"
#include "poseroi/error.hpp"
#include "test_util.hpp"

namespace poseroi {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string command = std::string(POSEROI_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kSmallConfig = R"({
  "data": {"synth": {"image_count": 10, "image_size": 64, "max_persons": 2, "seed": 4}},
  "model": {"backbone": {"stem_channels": 4, "stage_channels": [4, 4, 8, 8], "convs_per_stage": 1, "fpn_channels": 8},
            "head": {"variant": "GcmSeries", "head_channels": 8, "heads": 2}},
  "train": {"total_iterations": 6, "batch_size": 2, "seed": 9, "checkpoint_every": 3},
  "eval": {"images": 5}
})";

RunConfig small_config() { return parse_run_config(kSmallConfig); }

fs::path write_config(const fs::path& dir, const std::string& text) {
  fs::create_directories(dir);
  std::ofstream(dir / "config_in.json") << text;
  return dir / "config_in.json";
}

CommandContext quiet(const fs::path& out, bool force = false) {
  CommandContext c;
  c.out = out;
  c.force = force;
  return c;
}

// Every file under `dir` except timing, keyed by relative path.
std::map<std::string, std::string> reproducible_files(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel.starts_with("timing")) continue;
    files[rel] = slurp(e.path());
  }
  return files;
}

TEST(RunConfigTest, DefaultsRoundTrip) {
  const RunConfig c = parse_run_config("{}");
  EXPECT_EQ(c.train.base_lr, 0.0025);
  EXPECT_EQ(c.model.head.variant, HeadVariant::GcmSeries);
  EXPECT_EQ(c.model.level, LevelStrategy::fixed_p2());
  EXPECT_EQ(parse_run_config(to_json(c)), c);
  const RunConfig s = small_config();
  EXPECT_EQ(parse_run_config(to_json(s)), s);
  EXPECT_EQ(s.checkpoint_every, 3);
  EXPECT_EQ(s.model.backbone.stage_channels, (std::array<int, 4>{4, 4, 8, 8}));
}

TEST(RunConfigTest, UnknownKeysAndTypesAreRejectedWithPath) {
  const auto message = [](const std::string& text) {
    try {
      parse_run_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  EXPECT_NE(message(R"({"trian": {}})").find("$.trian"), std::string::npos);
  EXPECT_NE(message(R"({"model": {"head": {"chanels": 3}}})").find("$.model.head.chanels"), std::string::npos);
  EXPECT_NE(message(R"({"data": {"synth": {"scale_mix": {"tiny": 1}}}})").find("$.data.synth.scale_mix.tiny"),
            std::string::npos);
  EXPECT_NE(message(R"({"train": {"total_iterations": 2.5}})").find("$.train.total_iterations"), std::string::npos);
  EXPECT_NE(message(R"({"train": {"seed": -1}})").find("$.train.seed"), std::string::npos);
  EXPECT_NE(message(R"({"model": {"level": "P7"}})").find("$.model.level"), std::string::npos);
  EXPECT_NE(message(R"({"eval": {"sigmas": [1, 2]}})").find("$.eval.sigmas"), std::string::npos);
  EXPECT_NE(message(R"({"model": 3})").find("$.model"), std::string::npos);
  EXPECT_NE(message("{").find("not valid JSON"), std::string::npos);
  EXPECT_NE(message(R"({"train": {"base_lr": -1}})").find("base_lr"), std::string::npos);
}

TEST(RunConfigTest, SigmasAndLevels) {
  EXPECT_EQ(parse_run_config(R"({"eval": {"sigmas": 0.5}})").eval.metrics.sigmas, SigmaTable::constant(0.5));
  std::string list = "[";
  for (int k = 0; k < kNumKeypoints; ++k) list += (k ? "," : "") + std::to_string(k + 1);
  const RunConfig c = parse_run_config(R"({"eval": {"sigmas": )" + list + "]}}");
  EXPECT_EQ(c.eval.metrics.sigmas.kappa[16], 17.0);
  EXPECT_EQ(parse_level("size_based"), LevelStrategy::size_based());
  EXPECT_EQ(parse_level("P4"), LevelStrategy::fixed(4));
  EXPECT_EQ(parse_run_config(R"({"model": {"head": {"variant": "Baseline8Conv"}}})").model.head.variant,
            HeadVariant::Baseline8Conv);
}

TEST(GenDataTest, SameConfigSameManifestAndLoaderRoundTrip) {
  const fs::path a = testing::scratch_dir("gen_a"), b = testing::scratch_dir("gen_b");
  const RunConfig c = small_config();
  const Manifest ma = cmd_gen_data(c, quiet(a));
  const Manifest mb = cmd_gen_data(c, quiet(b));
  EXPECT_EQ(ma.hash, mb.hash);
  EXPECT_EQ(read_manifest(a).hash, ma.hash);
  const Dataset back = read_dataset(a);
  EXPECT_EQ(back, synth_generate(c.data.synth));
  for (const ImageRecord& r : back.images) {
    EXPECT_GE(r.annotations.size(), 1u);
    EXPECT_LE(r.annotations.size(), 2u);
  }
  EXPECT_EQ(parse_run_config(slurp(a / "config.json")).data.synth, c.data.synth);
}

TEST(GenDataTest, DefaultTwoHundredImagesValidate) {
  const fs::path dir = testing::scratch_dir("gen_default");
  RunConfig c;
  cmd_gen_data(c, quiet(dir));
  const Dataset d = read_dataset(dir);
  EXPECT_EQ(d.images.size(), 200u);
  for (const ImageRecord& r : d.images) {
    EXPECT_GE(r.annotations.size(), 1u);
    EXPECT_LE(r.annotations.size(), 3u);
  }
}

TEST(GenDataTest, NonEmptyOutputNeedsForceAndForceReproduces) {
  const fs::path dir = testing::scratch_dir("gen_force");
  const RunConfig c = small_config();
  cmd_gen_data(c, quiet(dir));
  const auto first = reproducible_files(dir);
  EXPECT_THROW(cmd_gen_data(c, quiet(dir)), ConfigError);
  cmd_gen_data(c, quiet(dir, true));
  EXPECT_EQ(reproducible_files(dir), first);
}

TEST(TrainCommandTest, LogMatchesScheduleAndResumeContinuesExactly) {
  const fs::path root = testing::scratch_dir("train_cmd");
  const RunConfig c = small_config();
  const TrainState full = cmd_train(c, quiet(root / "full"));
  ASSERT_TRUE(fs::exists(root / "full" / "checkpoint.ckpt"));
  ASSERT_TRUE(fs::exists(root / "full" / "checkpoints" / "iter_0000003.ckpt"));

  std::vector<json> lines;
  std::istringstream log(slurp(root / "full" / "train_log.jsonl"));
  for (std::string line; std::getline(log, line);) lines.push_back(json::parse(line));
  ASSERT_EQ(lines.size(), 6u);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(lines[i]["iteration"].get<int>(), i);
    EXPECT_EQ(lines[i]["lr"].get<double>(), lr_at(i, c.train));
    EXPECT_EQ(lines[i]["loss"].get<double>(), full.log.iterations[i].loss);
  }

  cmd_train(c, quiet(root / "resumed"), root / "full" / "checkpoints" / "iter_0000003.ckpt");
  std::istringstream resumed(slurp(root / "resumed" / "train_log.jsonl"));
  std::vector<std::string> tail;
  for (std::string line; std::getline(resumed, line);) tail.push_back(line);
  ASSERT_EQ(tail.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(json::parse(tail[i]), lines[3 + i]);
  EXPECT_EQ(slurp(root / "resumed" / "checkpoint.ckpt"), slurp(root / "full" / "checkpoint.ckpt"));
}

TEST(TrainCommandTest, ForcedRerunReproducesEveryFile) {
  const fs::path dir = testing::scratch_dir("train_rerun");
  const RunConfig c = small_config();
  cmd_train(c, quiet(dir));
  const auto first = reproducible_files(dir);
  cmd_train(c, quiet(dir, true));
  EXPECT_EQ(reproducible_files(dir), first);
  EXPECT_TRUE(first.contains("checkpoint.ckpt"));
}

TEST(TrainCommandTest, ResumeIntoMismatchedModelIsAShapeError) {
  const fs::path root = testing::scratch_dir("train_mismatch");
  const RunConfig c = small_config();
  cmd_train(c, quiet(root / "a"));
  RunConfig other = c;
  other.model.head.head_channels = 16;
  EXPECT_THROW(cmd_train(other, quiet(root / "b"), root / "a" / "checkpoint.ckpt"), ShapeError);
}

TEST(EvalCommandTest, ReportRoundTripsAndMatchesInProcess) {
  const fs::path root = testing::scratch_dir("eval_cmd");
  const RunConfig c = small_config();
  cmd_train(c, quiet(root / "train"));
  const EvalReport report = cmd_eval(c, root / "train" / "checkpoint.ckpt", quiet(root / "eval"));
  EXPECT_EQ(report_from_json(slurp(root / "eval" / "report.json")), report);
  EXPECT_EQ(slurp(root / "eval" / "report.txt"), to_text(report));

  ParameterStore weights = init_model(c.model, 123);
  restore_weights(weights, load_checkpoint(root / "train" / "checkpoint.ckpt"));
  const Dataset data = synth_generate(c.data.synth);
  EXPECT_EQ(evaluate(weights, c.model, data, c.eval), report);
  Dataset first_five;
  first_five.images.assign(data.images.begin(), data.images.begin() + 5);
  EXPECT_EQ(report.num_ground_truths, static_cast<int>(ground_truths(first_five).size()));
}

TEST(EvalCommandTest, GroundTruthAsPredictionsScoresOne) {
  const Dataset d = synth_generate(small_config().data.synth);
  std::vector<Prediction> preds;
  for (const GroundTruth& g : ground_truths(d)) preds.push_back({g.image_id, g.id, g.keypoints, 1.0, g.box});
  const EvalReport r = ap_eval(preds, ground_truths(d));
  EXPECT_EQ(r.ap_mean, 1.0);
  EXPECT_EQ(r.pck, 1.0);
}

TEST(AblationTest, MagnificationSweepShape) {
  const fs::path root = testing::scratch_dir("ablate_mag");
  const RunConfig c = small_config();
  cmd_train(c, quiet(root / "train"));
  const auto rows =
      cmd_ablate_magnification(c, quiet(root / "mag"), SweepMode::TrainOnce, root / "train" / "checkpoint.ckpt");
  ASSERT_EQ(rows.size(), 11u);
  std::istringstream csv(slurp(root / "mag" / "ablate_mag.csv"));
  std::string header;
  std::getline(csv, header);
  EXPECT_TRUE(header.starts_with("mode,magnification,ap_mean,"));
  double previous = 0.0;
  int count = 0;
  for (std::string line; std::getline(csv, line); ++count) {
    EXPECT_TRUE(line.starts_with("train_once,"));
    const double m = std::stod(line.substr(line.find(',') + 1));
    EXPECT_GT(m, previous);
    previous = m;
  }
  EXPECT_EQ(count, 11);
  EXPECT_EQ(rows.front().magnification, 1.0);
  EXPECT_EQ(rows.back().magnification, 1.5);
  EXPECT_THROW(cmd_ablate_magnification(c, quiet(root / "bad"), SweepMode::TrainPerPoint,
                                        root / "train" / "checkpoint.ckpt"),
               ConfigError);
}

TEST(AblationTest, LevelSweepShape) {
  const fs::path dir = testing::scratch_dir("ablate_level");
  RunConfig c = small_config();
  c.train.total_iterations = 2;
  const auto rows = cmd_ablate_level(c, quiet(dir));
  ASSERT_EQ(rows.size(), 5u);
  std::istringstream csv(slurp(dir / "ablate_level.csv"));
  std::string header;
  std::getline(csv, header);
  EXPECT_NE(header.find("miss_small"), std::string::npos);
  EXPECT_NE(header.find("miss_left_wrist"), std::string::npos);
  std::vector<std::string> names;
  for (std::string line; std::getline(csv, line);) names.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(names, (std::vector<std::string>{"size_based", "P2", "P3", "P4", "P5"}));
}

TEST(RfCommandTest, HeadsAndArbitraryStacks) {
  RunConfig c;
  c.model.head.variant = HeadVariant::Baseline8Conv;
  EXPECT_EQ(cmd_rf(c), "17");
  c.model.head.variant = HeadVariant::GcmSeries;
  EXPECT_EQ(cmd_rf(c), "global");
  c.model.head.variant = HeadVariant::GcmParallel;
  EXPECT_EQ(cmd_rf(c), "global");

  // Oracle: walk back from one output cell, widening by each layer in turn.
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::pair<int, int>> stack(std::uniform_int_distribution<int>(1, 6)(rng));
    std::string spec;
    for (auto& [k, s] : stack) {
      k = std::uniform_int_distribution<int>(1, 7)(rng);
      s = std::uniform_int_distribution<int>(1, 3)(rng);
      spec += (spec.empty() ? "" : ",") + std::to_string(k) + ":" + std::to_string(s);
    }
    long long extent = 1;
    for (auto it = stack.rbegin(); it != stack.rend(); ++it) extent = (extent - 1) * it->second + it->first;
    EXPECT_EQ(cmd_rf(c, spec), std::to_string(extent)) << spec;
  }
  EXPECT_THROW(cmd_rf(c, std::string("3x1")), ConfigError);
}

TEST(CliBinaryTest, ExitCodesAndStatus) {
  const fs::path root = testing::scratch_dir("cli_bin");
  const fs::path config = write_config(root, kSmallConfig);
  const std::string cfg = " --config " + config.string() + " -q";

  EXPECT_EQ(run_cli("rf" + cfg), 0);
  EXPECT_EQ(run_cli("gen-data" + cfg + " --out " + (root / "data").string()), 0);
  EXPECT_EQ(json::parse(slurp(root / "data" / "status.json"))["exit_code"], 0);
  // Refused: non-empty output. Its earlier status stays.
  EXPECT_EQ(run_cli("gen-data" + cfg + " --out " + (root / "data").string()), 2);
  EXPECT_EQ(json::parse(slurp(root / "data" / "status.json"))["exit_code"], 0);

  std::ofstream(root / "unknown.json") << R"({"train": {"iterations": 5}})";
  EXPECT_EQ(run_cli("train --config " + (root / "unknown.json").string() + " --out " + (root / "x").string()), 2);
  EXPECT_EQ(run_cli("nonsense"), 2);

  // Smoke: 50 iterations on 10 images.
  json smoke = json::parse(kSmallConfig);
  smoke["train"]["total_iterations"] = 50;
  std::ofstream(root / "smoke.json") << smoke.dump();
  EXPECT_EQ(run_cli("train -q --config " + (root / "smoke.json").string() + " --data " + (root / "data").string() + " --out " + (root / "train").string()), 0);
  EXPECT_TRUE(fs::exists(root / "train" / "checkpoint.ckpt"));

  EXPECT_EQ(run_cli("eval" + cfg + " --checkpoint " + (root / "missing.ckpt").string() + " --out " +
                    (root / "e").string()),
            3);
  std::ofstream(root / "data" / "annotations.json", std::ios::app) << '\n';
  EXPECT_EQ(run_cli("train" + cfg + " --data " + (root / "data").string() + " --out " + (root / "t2").string()), 3);

  std::ofstream(root / "hot.json") << R"({"data": {"synth": {"image_count": 4, "image_size": 64}},
    "model": {"backbone": {"stem_channels": 4, "stage_channels": [4, 4, 8, 8], "convs_per_stage": 1, "fpn_channels": 8},
              "head": {"head_channels": 8, "heads": 2}},
    "train": {"total_iterations": 20, "base_lr": 1e12, "momentum": 0.0}})";
  EXPECT_EQ(run_cli("train -q --config " + (root / "hot.json").string() + " --out " + (root / "hot").string()), 4);
  const json status = json::parse(slurp(root / "hot" / "status.json"));
  EXPECT_EQ(status["exit_code"], 4);
  EXPECT_FALSE(status["ok"].get<bool>());
  EXPECT_TRUE(fs::exists(root / "hot" / "failure.ckpt"));
}

}  // namespace
}  // namespace poseroi
