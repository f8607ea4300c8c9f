#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "poseroi/backbone.hpp"
#include "poseroi/data.hpp"
#include "poseroi/eval.hpp"
#include "poseroi/keypoint_head.hpp"

namespace poseroi {

struct ModelConfig {
  BackboneConfig backbone;
  HeadConfig head;
  LevelStrategy level = LevelStrategy::fixed_p2();
  /// Proposal boxes are enlarged by this factor before RoIAlign.
  double magnification = 1.3;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Backbone, FPN and head weights drawn from one seed.
ParameterStore init_model(const ModelConfig& config, std::uint64_t seed);

/// Keypoint logits for every proposal box of one image. The image is
/// zero-padded to a multiple of 32 first.
struct ModelOutput {
  std::vector<Var> logits;
  /// The enlarged boxes the heatmaps cover, in image coordinates.
  std::vector<Box> rois;
};

ModelOutput model_forward(ParamBinding& params, const ModelConfig& config, const Tensor& image,
                          std::span<const Box> proposals);

/// Simulated detector output for evaluation: every ground-truth box jittered
/// with a generator seeded by (seed, image id).
struct ProposalNoise {
  double scale = 0.1;
  double shift = 0.05;
  std::uint64_t seed = 0;

  bool operator==(const ProposalNoise&) const = default;
};

std::vector<Box> simulate_proposals(const ImageRecord& record, const ProposalNoise& noise);

/// Decoded keypoints for each simulated proposal; the score is the mean
/// keypoint confidence.
std::vector<Prediction> predict(const ParameterStore& weights, const ModelConfig& config, const Dataset& dataset,
                                const ProposalNoise& noise, int threads = 1);

std::vector<GroundTruth> ground_truths(const Dataset& dataset);

}  // namespace poseroi
