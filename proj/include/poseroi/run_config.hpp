#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "poseroi/data.hpp"
#include "poseroi/eval.hpp"
#include "poseroi/model.hpp"
#include "poseroi/trainer.hpp"

namespace poseroi {

struct DataSection {
  /// "synth": generate from `synth`, or read a generated dataset directory
  /// when `path` is set. "coco": `path` is an annotations file and pixels
  /// come from `image_root`.
  std::string source = "synth";
  std::filesystem::path path;
  std::filesystem::path image_root;
  SynthConfig synth;

  bool operator==(const DataSection&) const = default;
};

struct EvalSection {
  EvalConfig metrics;
  ProposalNoise proposals;
  /// Evaluate on the first `images` images; 0 means all.
  int images = 0;

  bool operator==(const EvalSection&) const = default;
};

/// Everything a command needs. Parsed from JSON; every key is optional and
/// unknown keys are rejected with their path.
struct RunConfig {
  DataSection data;
  ModelConfig model;
  TrainConfig train;
  /// Save a checkpoint every this many iterations (0: final only).
  int checkpoint_every = 0;
  EvalSection eval;
  std::filesystem::path output;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved JSON with every default spelled out. Parsing it back gives
/// the same configuration.
std::string to_json(const RunConfig& config);

LevelStrategy parse_level(const std::string& text);

}  // namespace poseroi
