#pragma once

#include <array>

#include "poseroi/geometry.hpp"
#include "poseroi/params.hpp"

namespace poseroi {

/// Small convolutional backbone: a stride-2 stem followed by four stages whose
/// first convolution halves the resolution, giving cumulative strides 4, 8,
/// 16 and 32.
struct BackboneConfig {
  int stem_channels = 16;
  std::array<int, 4> stage_channels = {16, 32, 64, 128};
  int convs_per_stage = 3;
  int fpn_channels = 32;

  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

inline constexpr int kInputMultiple = 32;
inline constexpr std::array<int, 4> kLevelStrides = {4, 8, 16, 32};

using StageOutputs = std::array<Var, 4>;

/// P2..P5, all with fpn_channels channels; level l has stride 2^l.
struct FeaturePyramid {
  std::array<Var, 4> levels;

  const Var& level(int l) const { return levels.at(static_cast<std::size_t>(l - 2)); }
};

/// FPN level assignment for person boxes.
struct LevelStrategy {
  enum class Kind { SizeBased, Fixed };

  Kind kind = Kind::Fixed;
  int k0 = 4;
  double canonical = 224.0;
  int fixed_level = 2;

  static LevelStrategy size_based(int k0 = 4, double canonical = 224.0) {
    return {Kind::SizeBased, k0, canonical, 2};
  }
  static LevelStrategy fixed(int level) { return {Kind::Fixed, 4, 224.0, level}; }
  static LevelStrategy fixed_p2() { return fixed(2); }

  std::string name() const;
  bool operator==(const LevelStrategy&) const = default;
};

/// Registers backbone and FPN weights under "backbone." and "fpn.".
void init_backbone(ParameterStore& store, const BackboneConfig& config, Rng& rng);

StageOutputs backbone_forward(ParamBinding& params, const BackboneConfig& config, const Var& image);

FeaturePyramid fpn_fuse(ParamBinding& params, const StageOutputs& stages);

/// floor(k0 + log2(sqrt(w*h) / canonical)) without clamping.
int size_based_level_unclamped(const Box& box, int k0, double canonical);

/// Pyramid level in [2, 5] the box reads its features from.
int select_level(const Box& box, const LevelStrategy& strategy);

/// Enlarge, pick a level, RoIAlign at that level's scale.
Var extract_person_features(const FeaturePyramid& pyramid, const Box& box, const LevelStrategy& strategy,
                            double magnification, int output_size = 14, int sampling_ratio = 2);

}  // namespace poseroi
