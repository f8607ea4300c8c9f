#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "poseroi/commands.hpp"
#include "poseroi/error.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool force = false;
  bool freeze_backbone = false;
  bool quiet = false;
};

void add_common(CLI::App& app, CommonFlags& flags, bool with_out = true) {
  app.add_option("--config", flags.config, "JSON run configuration (defaults apply to missing keys)");
  if (with_out) app.add_option("--out", flags.out, "Output directory (overrides \"output\")");
  app.add_option("--seed", flags.seed, "Set every seed: synthetic data, training, proposal jitter");
  app.add_option("--threads", flags.threads, "Worker threads (results do not depend on it)");
  app.add_flag("--force", flags.force, "Replace the contents of a non-empty output directory");
  app.add_flag("--freeze-backbone", flags.freeze_backbone, "Train the keypoint head only");
  app.add_flag("-q,--quiet", flags.quiet, "No progress lines on stderr");
}

poseroi::RunConfig resolve(const CommonFlags& flags, const std::optional<std::string>& data_override = {}) {
  poseroi::RunConfig config = flags.config.empty() ? poseroi::RunConfig{} : poseroi::load_run_config(flags.config);
  if (flags.seed) {
    config.data.synth.seed = *flags.seed;
    config.train.seed = *flags.seed;
    config.eval.proposals.seed = *flags.seed;
  }
  if (flags.threads) config.train.threads = *flags.threads;
  if (flags.freeze_backbone) config.train.freeze_backbone = true;
  if (data_override) config.data.path = *data_override;
  if (!flags.out.empty()) config.output = flags.out;
  config.validate();
  return config;
}

poseroi::CommandContext context_for(const CommonFlags& flags, const poseroi::RunConfig& config) {
  poseroi::CommandContext context;
  context.out = config.output;
  context.force = flags.force;
  if (!flags.quiet) context.progress = [](std::string_view line) { std::cerr << line << '\n'; };
  return context;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Top-down keypoint estimation on RoI-aligned pyramid features"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint;
  std::string resume;
  std::string data;
  std::string layers;
  bool per_point = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  add_common(*gen, flags);
  CLI::App* train = app.add_subcommand("train", "Train and write checkpoint and logs");
  add_common(*train, flags);
  train->add_option("--resume", resume, "Continue from a checkpoint");
  train->add_option("--data", data, "Dataset directory or COCO file (overrides data.path)");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(*eval, flags);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  eval->add_option("--data", data, "Dataset directory or COCO file (overrides data.path)");
  CLI::App* mag = app.add_subcommand("ablate-mag", "Sweep box magnification 1.00..1.50");
  add_common(*mag, flags);
  mag->add_option("--checkpoint", checkpoint, "Evaluate this model instead of training once");
  mag->add_flag("--train-per-point", per_point, "Train a fresh model for every magnification");
  mag->add_option("--data", data, "Dataset directory or COCO file (overrides data.path)");
  CLI::App* level = app.add_subcommand("ablate-level", "Train and evaluate per pyramid level strategy");
  add_common(*level, flags);
  level->add_option("--data", data, "Dataset directory or COCO file (overrides data.path)");
  CLI::App* rf = app.add_subcommand("rf", "Receptive field of the head trunk");
  add_common(*rf, flags, false);
  rf->add_option("--layers", layers, "Conv stack as kernel:stride,... instead of the configured head");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  const std::optional<std::string> data_override = data.empty() ? std::nullopt : std::optional(data);
  fs::path out;
  std::shared_ptr<bool> prepared;
  try {
    const poseroi::RunConfig config = resolve(flags, data_override);
    const poseroi::CommandContext context = context_for(flags, config);
    out = config.output;
    prepared = context.prepared;
    if (chosen == gen) {
      const poseroi::Manifest m = poseroi::cmd_gen_data(config, context);
      std::cout << m.hash << '\n';
    } else if (chosen == train) {
      poseroi::cmd_train(config, context, resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
    } else if (chosen == eval) {
      std::cout << poseroi::to_text(poseroi::cmd_eval(config, checkpoint, context));
    } else if (chosen == mag) {
      const auto mode = per_point ? poseroi::SweepMode::TrainPerPoint : poseroi::SweepMode::TrainOnce;
      const auto rows = poseroi::cmd_ablate_magnification(
          config, context, mode, checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint));
      std::cout << poseroi::magnification_csv(rows, mode);
    } else if (chosen == level) {
      std::cout << poseroi::level_csv(poseroi::cmd_ablate_level(config, context));
    } else {
      std::cout << poseroi::cmd_rf(config, layers.empty() ? std::nullopt : std::optional(layers)) << '\n';
    }
    if (*prepared) poseroi::write_status(out, command, 0, "ok");
    return 0;
  } catch (const std::exception& e) {
    const int code = poseroi::exit_code_for(e);
    std::cerr << "poseroi " << command << ": " << e.what() << '\n';
    if (prepared && *prepared) poseroi::write_status(out, command, code, e.what());
    return code;
  }
}
