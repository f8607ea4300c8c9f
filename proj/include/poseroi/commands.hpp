#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "poseroi/run_config.hpp"

namespace poseroi {

/// Where a command writes and how chatty it is.
struct CommandContext {
  std::filesystem::path out;
  /// Replace the contents of a non-empty `out` instead of refusing.
  bool force = false;
  std::function<void(std::string_view)> progress;
  /// Set once the command has taken over `out`; a refused directory is left
  /// alone, status file included.
  std::shared_ptr<bool> prepared = std::make_shared<bool>(false);
};

/// Dataset named by the data section: generated, read from a generated
/// directory, or loaded from COCO JSON.
Dataset load_data(const RunConfig& config);

/// Predictions from simulated proposals on the first `eval.images` images,
/// scored against their ground truth.
EvalReport evaluate(const ParameterStore& weights, const ModelConfig& model, const Dataset& dataset,
                    const EvalSection& eval, int threads = 1);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(std::string_view text);

/// 1.00, 1.05, ..., 1.50.
std::vector<double> magnification_grid();

enum class SweepMode { TrainOnce, TrainPerPoint };
std::string to_string(SweepMode mode);

struct MagnificationRow {
  double magnification = 0.0;
  EvalReport report;
};

/// TrainOnce trains at config.model.magnification (or uses `trained`) and
/// evaluates at each magnification; TrainPerPoint trains a fresh model per
/// point from the same seed.
std::vector<MagnificationRow> magnification_sweep(const RunConfig& config, const Dataset& dataset,
                                                  std::span<const double> magnifications, SweepMode mode,
                                                  const ParameterStore* trained = nullptr,
                                                  const std::function<void(std::string_view)>& progress = {});

struct LevelRow {
  LevelStrategy level;
  EvalReport report;
};

/// size_based, P2, P3, P4, P5.
std::vector<LevelStrategy> level_grid();

/// One model trained and evaluated per level strategy.
std::vector<LevelRow> level_sweep(const RunConfig& config, const Dataset& dataset, std::span<const LevelStrategy> levels,
                                  const std::function<void(std::string_view)>& progress = {});

std::string magnification_csv(std::span<const MagnificationRow> rows, SweepMode mode);
std::string level_csv(std::span<const LevelRow> rows);

/// Commands. Each prepares `context.out`, writes config.json (the resolved
/// configuration) and its artifacts, and timing in a separate timing file.
Manifest cmd_gen_data(const RunConfig& config, const CommandContext& context);
TrainState cmd_train(const RunConfig& config, const CommandContext& context,
                     const std::optional<std::filesystem::path>& resume = std::nullopt);
EvalReport cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint, const CommandContext& context);
std::vector<MagnificationRow> cmd_ablate_magnification(const RunConfig& config, const CommandContext& context,
                                                       SweepMode mode,
                                                       const std::optional<std::filesystem::path>& checkpoint = {});
std::vector<LevelRow> cmd_ablate_level(const RunConfig& config, const CommandContext& context);

/// "17" style report of the head trunk's receptive field, or "global". With
/// `layers` ("k:s,k:s,...") the field of that conv stack instead.
std::string cmd_rf(const RunConfig& config, const std::optional<std::string>& layers = std::nullopt);

/// Machine-readable outcome of a command, written as status.json.
void write_status(const std::filesystem::path& dir, std::string_view command, int exit_code,
                  std::string_view message);

/// 0 success, 2 configuration, 3 data, 4 numeric failure.
int exit_code_for(const std::exception& error);

}  // namespace poseroi
