#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poseroi/checkpoint.hpp"
#include "poseroi/model.hpp"

namespace poseroi {

struct TrainConfig {
  double base_lr = 0.0025;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int total_iterations = 2000;
  /// Fractions of total_iterations after which the rate drops by decay_factor.
  std::array<double, 2> milestones = {2.0 / 3.0, 8.0 / 9.0};
  double decay_factor = 0.1;
  /// Images per iteration; every annotated person of an image is used.
  int batch_size = 4;
  /// Proposal simulation: ground-truth boxes jittered by these magnitudes.
  double jitter_scale = 0.1;
  double jitter_shift = 0.05;
  double flip_probability = 0.5;
  bool freeze_backbone = false;
  std::uint64_t seed = 0;
  /// Worker threads for the per-image forward/backward fan-out. Gradients are
  /// reduced in image order, so the count never changes the result.
  int threads = 1;
  /// Evaluate PCK on the first eval_images images every this many epochs
  /// (0 disables).
  int eval_every_epochs = 0;
  int eval_images = 20;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Iteration at which each milestone takes effect: llround(fraction * total).
std::array<int, 2> milestone_iterations(const TrainConfig& config);

/// base_lr * decay_factor^(milestones passed). ConfigError outside [0, total).
double lr_at(int iteration, const TrainConfig& config);

struct IterationRecord {
  int iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
  int persons = 0;

  bool operator==(const IterationRecord&) const = default;
};

struct EvalSnapshot {
  int iteration = 0;
  double pck = 0.0;

  bool operator==(const EvalSnapshot&) const = default;
};

struct TrainLog {
  std::vector<IterationRecord> iterations;
  std::vector<EvalSnapshot> snapshots;
  /// Wall-clock seconds per iteration; kept apart because it never repeats.
  std::vector<double> seconds;
};

/// Mean loss over the first and the last `window` iterations of a log. Single
/// batches are too noisy to compare on their own.
struct LossTrend {
  double initial = 0.0;
  double final = 0.0;

  double ratio() const { return final / initial; }
};
LossTrend loss_trend(const TrainLog& log, int window);

/// One JSON object per line.
std::string to_json_line(const IterationRecord& record);
std::string to_json_line(const EvalSnapshot& snapshot);

struct TrainHooks {
  std::function<void(const IterationRecord&, double seconds)> on_iteration;
  std::function<void(const EvalSnapshot&)> on_snapshot;
  /// Called with the state after every `checkpoint_every` iterations.
  int checkpoint_every = 0;
  std::function<void(const Checkpoint&)> on_checkpoint;
  /// Where to write the pre-update state if a loss or gradient goes non-finite.
  std::filesystem::path failure_snapshot;
};

/// Momentum SGD (v = momentum * v + g; w -= lr * v) on the batch mean of the
/// per-image losses, each the mean keypoint loss over that image's persons.
/// Continues from `state.iteration`; throws NumericError on non-finite values.
struct TrainState {
  Checkpoint checkpoint;
  TrainLog log;
};

TrainState train(const Dataset& dataset, const ModelConfig& model, const TrainConfig& config, Checkpoint start,
                 const TrainHooks& hooks = {});

/// Fresh state: init_model(model, config.seed), zero velocity, iteration 0.
Checkpoint initial_checkpoint(const ModelConfig& model, const TrainConfig& config);

/// Loss and parameter gradients of one image, exactly as the trainer computes
/// them for iteration `iteration`, batch slot `slot`.
struct SampleGradient {
  double loss = 0.0;
  int persons = 0;
  std::map<std::string, Tensor> gradients;
};

SampleGradient sample_gradient(const ParameterStore& weights, const ModelConfig& model, const TrainConfig& config,
                               const ImageRecord& image, int iteration, int slot);

/// Indices of the images drawn for `iteration`.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, const TrainConfig& config, int iteration);

/// One momentum step in place.
void sgd_step(ParameterStore& weights, std::map<std::string, Tensor>& velocity,
              const std::map<std::string, Tensor>& gradients, double lr, const TrainConfig& config);

/// PCK of predictions against ground truth on the first `count` images.
double quick_pck(const ParameterStore& weights, const ModelConfig& model, const Dataset& dataset, int count,
                 double factor = 0.2, std::uint64_t seed = 0, int threads = 1);

}  // namespace poseroi
