#include "poseroi/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "poseroi/checkpoint.hpp"
#include "poseroi/error.hpp"

namespace poseroi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_file(const fs::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("write failed for " + path.string());
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void say(const CommandContext& context, const std::string& line) {
  if (context.progress) context.progress(line);
}

// Creates `out`, or empties it under --force. Refuses to touch a non-empty
// directory otherwise.
void prepare_output(const CommandContext& context, const RunConfig& config) {
  const fs::path& out = context.out;
  if (out.empty()) throw ConfigError("no output directory: pass --out or set \"output\" in the config");
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw ConfigError("output " + out.string() + " exists and is not a directory");
    if (!fs::is_empty(out)) {
      if (!context.force) throw ConfigError("output directory " + out.string() + " is not empty (use --force)");
      for (const fs::directory_entry& e : fs::directory_iterator(out)) fs::remove_all(e.path());
    }
  }
  fs::create_directories(out);
  *context.prepared = true;
  RunConfig resolved = config;
  resolved.output = out;
  write_file(out / "config.json", to_json(resolved));
}

void write_timing(const fs::path& dir, double seconds) {
  write_file(dir / "timing.json", json{{"seconds", seconds}}.dump() + "\n");
}

ParameterStore weights_for(const ModelConfig& model, const Checkpoint& checkpoint) {
  ParameterStore store = init_model(model, 0);
  restore_weights(store, checkpoint);
  return store;
}

ParameterStore train_fresh(const TrainConfig& train_config, const ModelConfig& model, const Dataset& dataset) {
  return train(dataset, model, train_config, initial_checkpoint(model, train_config)).checkpoint.weights;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

Dataset load_data(const RunConfig& config) {
  const DataSection& d = config.data;
  if (d.source == "coco") return load_coco_json(d.path, d.image_root);
  if (!d.path.empty()) return read_dataset(d.path);
  return synth_generate(d.synth, config.train.threads);
}

EvalReport evaluate(const ParameterStore& weights, const ModelConfig& model, const Dataset& dataset,
                    const EvalSection& eval, int threads) {
  Dataset subset;
  const std::size_t n = eval.images > 0 ? std::min<std::size_t>(static_cast<std::size_t>(eval.images), dataset.images.size())
                                        : dataset.images.size();
  subset.images.assign(dataset.images.begin(), dataset.images.begin() + static_cast<std::ptrdiff_t>(n));
  return ap_eval(predict(weights, model, subset, eval.proposals, threads), ground_truths(subset), eval.metrics);
}

std::string report_to_json(const EvalReport& r) {
  return json{{"ap_mean", r.ap_mean},
              {"ap_per_threshold", r.ap_per_threshold},
              {"ap_medium", r.ap_medium},
              {"ap_large", r.ap_large},
              {"pck", r.pck},
              {"per_keypoint_miss_rate", r.per_keypoint_miss_rate},
              {"per_scale_miss_rate", r.per_scale_miss_rate},
              {"num_ground_truths", r.num_ground_truths},
              {"num_predictions", r.num_predictions}}
             .dump(2) +
         "\n";
}

EvalReport report_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    EvalReport r;
    r.ap_mean = j.at("ap_mean").get<double>();
    r.ap_per_threshold = j.at("ap_per_threshold").get<std::array<double, kNumThresholds>>();
    r.ap_medium = j.at("ap_medium").get<double>();
    r.ap_large = j.at("ap_large").get<double>();
    r.pck = j.at("pck").get<double>();
    r.per_keypoint_miss_rate = j.at("per_keypoint_miss_rate").get<std::array<double, kNumKeypoints>>();
    r.per_scale_miss_rate = j.at("per_scale_miss_rate").get<std::array<double, 3>>();
    r.num_ground_truths = j.at("num_ground_truths").get<int>();
    r.num_predictions = j.at("num_predictions").get<int>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
}

std::vector<double> magnification_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back((100 + 5 * i) / 100.0);
  return grid;
}

std::string to_string(SweepMode mode) { return mode == SweepMode::TrainOnce ? "train_once" : "train_per_point"; }

std::vector<MagnificationRow> magnification_sweep(const RunConfig& config, const Dataset& dataset,
                                                  std::span<const double> magnifications, SweepMode mode,
                                                  const ParameterStore* trained,
                                                  const std::function<void(std::string_view)>& progress) {
  const auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  std::optional<ParameterStore> shared;
  if (mode == SweepMode::TrainOnce) {
    if (trained) {
      shared = *trained;
    } else {
      note("training once at magnification " + fixed2(config.model.magnification));
      shared = train_fresh(config.train, config.model, dataset);
    }
  }
  std::vector<MagnificationRow> rows;
  for (double m : magnifications) {
    ModelConfig model = config.model;
    model.magnification = m;
    if (mode == SweepMode::TrainPerPoint) note("training at magnification " + fixed2(m));
    const ParameterStore weights = mode == SweepMode::TrainOnce ? *shared : train_fresh(config.train, model, dataset);
    rows.push_back({m, evaluate(weights, model, dataset, config.eval, config.train.threads)});
    note("magnification " + fixed2(m) + " ap " + std::to_string(rows.back().report.ap_mean));
  }
  return rows;
}

std::vector<LevelStrategy> level_grid() {
  return {LevelStrategy::size_based(), LevelStrategy::fixed(2), LevelStrategy::fixed(3), LevelStrategy::fixed(4),
          LevelStrategy::fixed(5)};
}

std::vector<LevelRow> level_sweep(const RunConfig& config, const Dataset& dataset, std::span<const LevelStrategy> levels,
                                  const std::function<void(std::string_view)>& progress) {
  std::vector<LevelRow> rows;
  for (const LevelStrategy& level : levels) {
    ModelConfig model = config.model;
    model.level = level;
    if (progress) progress("training with level " + level.name());
    const ParameterStore weights = train_fresh(config.train, model, dataset);
    rows.push_back({level, evaluate(weights, model, dataset, config.eval, config.train.threads)});
    if (progress) progress("level " + level.name() + " ap " + std::to_string(rows.back().report.ap_mean));
  }
  return rows;
}

std::string magnification_csv(std::span<const MagnificationRow> rows, SweepMode mode) {
  std::string out = "mode,magnification," + csv_header() + "\n";
  for (const MagnificationRow& r : rows) out += to_string(mode) + "," + fixed2(r.magnification) + "," + csv_row(r.report) + "\n";
  return out;
}

std::string level_csv(std::span<const LevelRow> rows) {
  std::string out = "level," + csv_header() + "\n";
  for (const LevelRow& r : rows) out += r.level.name() + "," + csv_row(r.report) + "\n";
  return out;
}

Manifest cmd_gen_data(const RunConfig& config, const CommandContext& context) {
  const Stopwatch clock;
  prepare_output(context, config);
  say(context, "generating " + std::to_string(config.data.synth.image_count) + " images");
  const Dataset dataset = synth_generate(config.data.synth, config.train.threads);
  const std::string source = json{{"generator", "synth"}, {"config", json::parse(to_json(config))["data"]["synth"]}}.dump();
  const Manifest manifest = write_dataset(context.out, dataset, source);
  // Validate through the load path before declaring success.
  if (read_dataset(context.out) != dataset) throw DataError("generated dataset does not read back identically");
  say(context, "manifest " + manifest.hash);
  write_timing(context.out, clock.seconds());
  return manifest;
}

TrainState cmd_train(const RunConfig& config, const CommandContext& context, const std::optional<fs::path>& resume) {
  const Stopwatch clock;
  const Dataset dataset = load_data(config);
  Checkpoint start = initial_checkpoint(config.model, config.train);
  if (resume) {
    const Checkpoint saved = load_checkpoint(*resume);
    restore_weights(start.weights, saved);
    start.velocity = saved.velocity;
    start.iteration = saved.iteration;
  }
  start.config_json = to_json(config);
  prepare_output(context, config);

  std::ofstream log(context.out / "train_log.jsonl");
  std::ofstream timing(context.out / "timing.jsonl");
  std::ofstream evals(context.out / "eval_log.jsonl");
  TrainHooks hooks;
  const int every = std::max(1, config.train.total_iterations / 20);
  hooks.on_iteration = [&](const IterationRecord& r, double seconds) {
    log << to_json_line(r) << '\n';
    timing << json{{"iteration", r.iteration}, {"seconds", seconds}}.dump() << '\n';
    if ((r.iteration + 1) % every == 0) {
      say(context, "iteration " + std::to_string(r.iteration + 1) + "/" + std::to_string(config.train.total_iterations) +
                       " loss " + std::to_string(r.loss));
    }
  };
  hooks.on_snapshot = [&](const EvalSnapshot& s) {
    evals << to_json_line(s) << '\n';
    say(context, "iteration " + std::to_string(s.iteration) + " pck " + std::to_string(s.pck));
  };
  hooks.failure_snapshot = context.out / "failure.ckpt";
  if (config.checkpoint_every > 0) {
    fs::create_directories(context.out / "checkpoints");
    hooks.checkpoint_every = config.checkpoint_every;
    hooks.on_checkpoint = [&](const Checkpoint& c) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%07lld.ckpt", static_cast<long long>(c.iteration));
      save_checkpoint(c, context.out / "checkpoints" / name);
    };
  }

  TrainState state = train(dataset, config.model, config.train, std::move(start), hooks);
  save_checkpoint(state.checkpoint, context.out / "checkpoint.ckpt");
  json summary = {{"iterations_run", state.log.iterations.size()}, {"final_iteration", state.checkpoint.iteration}};
  if (!state.log.iterations.empty()) {
    const int window = std::max(1, static_cast<int>(state.log.iterations.size()) / 20);
    const LossTrend trend = loss_trend(state.log, window);
    summary["loss_window"] = window;
    summary["initial_loss"] = trend.initial;
    summary["final_loss"] = trend.final;
    summary["loss_ratio"] = trend.ratio();
  }
  write_file(context.out / "summary.json", summary.dump(2) + "\n");
  write_timing(context.out, clock.seconds());
  return state;
}

EvalReport cmd_eval(const RunConfig& config, const fs::path& checkpoint, const CommandContext& context) {
  const Stopwatch clock;
  const ParameterStore weights = weights_for(config.model, load_checkpoint(checkpoint));
  const Dataset dataset = load_data(config);
  prepare_output(context, config);
  const EvalReport report = evaluate(weights, config.model, dataset, config.eval, config.train.threads);
  write_file(context.out / "report.json", report_to_json(report));
  write_file(context.out / "report.txt", to_text(report));
  say(context, "ap_mean " + std::to_string(report.ap_mean) + " pck " + std::to_string(report.pck));
  write_timing(context.out, clock.seconds());
  return report;
}

std::vector<MagnificationRow> cmd_ablate_magnification(const RunConfig& config, const CommandContext& context,
                                                       SweepMode mode, const std::optional<fs::path>& checkpoint) {
  const Stopwatch clock;
  if (checkpoint && mode == SweepMode::TrainPerPoint) {
    throw ConfigError("a checkpoint cannot be combined with train-per-point");
  }
  std::optional<ParameterStore> trained;
  if (checkpoint) trained = weights_for(config.model, load_checkpoint(*checkpoint));
  const Dataset dataset = load_data(config);
  prepare_output(context, config);
  const std::vector<double> grid = magnification_grid();
  const auto rows = magnification_sweep(config, dataset, grid, mode, trained ? &*trained : nullptr, context.progress);
  write_file(context.out / "ablate_mag.csv", magnification_csv(rows, mode));
  write_timing(context.out, clock.seconds());
  return rows;
}

std::vector<LevelRow> cmd_ablate_level(const RunConfig& config, const CommandContext& context) {
  const Stopwatch clock;
  const Dataset dataset = load_data(config);
  prepare_output(context, config);
  const std::vector<LevelStrategy> grid = level_grid();
  const auto rows = level_sweep(config, dataset, grid, context.progress);
  write_file(context.out / "ablate_level.csv", level_csv(rows));
  write_timing(context.out, clock.seconds());
  return rows;
}

std::string cmd_rf(const RunConfig& config, const std::optional<std::string>& layers) {
  if (!layers) {
    const ReceptiveField rf = receptive_field(config.model.head);
    return rf.global ? "global" : std::to_string(rf.extent);
  }
  std::vector<LayerSpec> stack;
  std::stringstream in(*layers);
  std::string item;
  while (std::getline(in, item, ',')) {
    LayerSpec spec;
    char colon = 0;
    std::istringstream field(item);
    if (!(field >> spec.kernel >> colon >> spec.stride) || colon != ':' || !(field >> std::ws).eof() || spec.kernel < 1 ||
        spec.stride < 1) {
      throw ConfigError("layer '" + item + "' is not of the form kernel:stride");
    }
    stack.push_back(spec);
  }
  if (stack.empty()) throw ConfigError("empty layer list");
  return std::to_string(receptive_field(stack));
}

void write_status(const fs::path& dir, std::string_view command, int exit_code, std::string_view message) {
  if (dir.empty() || !fs::is_directory(dir)) return;
  const json status = {{"command", command}, {"ok", exit_code == 0}, {"exit_code", exit_code}, {"message", message}};
  write_file(dir / "status.json", status.dump(2) + "\n");
}

int exit_code_for(const std::exception& error) {
  if (dynamic_cast<const ConfigError*>(&error) || dynamic_cast<const ShapeError*>(&error)) return 2;
  if (dynamic_cast<const NumericError*>(&error)) return 4;
  if (dynamic_cast<const DataError*>(&error) || dynamic_cast<const fs::filesystem_error*>(&error)) return 3;
  return 1;
}

}  // namespace poseroi
