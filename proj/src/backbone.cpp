#include "poseroi/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "poseroi/error.hpp"
#include "poseroi/ops.hpp"

namespace poseroi {

namespace {

std::string stage_conv(int stage, int conv) {
  return "backbone.stage" + std::to_string(stage + 1) + ".conv" + std::to_string(conv);
}

void add_conv(ParameterStore& store, const std::string& name, int cout, int cin, int k, Rng& rng) {
  store.add(name + ".weight", he_uniform({cout, cin, k, k}, rng));
  store.add(name + ".bias", Tensor({cout}, 0.0));
}

Var conv(ParamBinding& p, const std::string& name, const Var& x, int stride, int padding) {
  return conv2d(x, p(name + ".weight"), p(name + ".bias"), stride, padding);
}

}  // namespace

void BackboneConfig::validate() const {
  if (stem_channels < 1 || fpn_channels < 1 || convs_per_stage < 1) {
    throw ConfigError("backbone: channel widths and convs_per_stage must be positive");
  }
  for (int c : stage_channels) {
    if (c < 1) throw ConfigError("backbone: stage widths must be positive");
  }
}

std::string LevelStrategy::name() const {
  if (kind == Kind::SizeBased) return "size_based";
  return "P" + std::to_string(fixed_level);
}

void init_backbone(ParameterStore& store, const BackboneConfig& config, Rng& rng) {
  config.validate();
  add_conv(store, "backbone.stem", config.stem_channels, 3, 3, rng);
  int in = config.stem_channels;
  for (int s = 0; s < 4; ++s) {
    const int width = config.stage_channels[static_cast<std::size_t>(s)];
    for (int c = 0; c < config.convs_per_stage; ++c) {
      add_conv(store, stage_conv(s, c), width, c == 0 ? in : width, 3, rng);
    }
    in = width;
  }
  for (int s = 0; s < 4; ++s) {
    add_conv(store, "fpn.lateral" + std::to_string(s + 2), config.fpn_channels,
             config.stage_channels[static_cast<std::size_t>(s)], 1, rng);
  }
  for (int s = 0; s < 4; ++s) {
    add_conv(store, "fpn.output" + std::to_string(s + 2), config.fpn_channels, config.fpn_channels, 3, rng);
  }
}

StageOutputs backbone_forward(ParamBinding& params, const BackboneConfig& config, const Var& image) {
  const Shape& shape = image.shape();
  if (shape.size() != 3 || shape[0] != 3) {
    throw ShapeError("backbone: image must be 3 x H x W, got " + to_string(shape));
  }
  if (shape[1] % kInputMultiple != 0 || shape[2] % kInputMultiple != 0) {
    throw ShapeError("backbone: image height and width must be multiples of " + std::to_string(kInputMultiple) +
                     ", got " + std::to_string(shape[1]) + " x " + std::to_string(shape[2]));
  }
  Var x = relu(conv(params, "backbone.stem", image, 2, 1));
  StageOutputs out;
  for (int s = 0; s < 4; ++s) {
    for (int c = 0; c < config.convs_per_stage; ++c) {
      x = relu(conv(params, stage_conv(s, c), x, c == 0 ? 2 : 1, 1));
    }
    out[static_cast<std::size_t>(s)] = x;
  }
  return out;
}

FeaturePyramid fpn_fuse(ParamBinding& params, const StageOutputs& stages) {
  for (int s = 1; s < 4; ++s) {
    const Shape& fine = stages[static_cast<std::size_t>(s - 1)].shape();
    const Shape& coarse = stages[static_cast<std::size_t>(s)].shape();
    if (fine[1] != 2 * coarse[1] || fine[2] != 2 * coarse[2]) {
      throw ShapeError("fpn: stage " + std::to_string(s + 1) + " extent " + to_string(coarse) +
                       " is not half of stage " + std::to_string(s) + " extent " + to_string(fine));
    }
  }
  FeaturePyramid pyramid;
  Var top;
  for (int s = 3; s >= 0; --s) {
    const std::string level = std::to_string(s + 2);
    Var lateral = conv(params, "fpn.lateral" + level, stages[static_cast<std::size_t>(s)], 1, 0);
    top = top.defined() ? add(lateral, bilinear_upsample(top, 2)) : lateral;
    pyramid.levels[static_cast<std::size_t>(s)] = conv(params, "fpn.output" + level, top, 1, 1);
  }
  return pyramid;
}

int size_based_level_unclamped(const Box& box, int k0, double canonical) {
  // floor(log2(r)) computed exactly from the binary exponent: r = m * 2^e with
  // m in [0.5, 1) gives floor(log2(r)) = e - 1.
  const double ratio = std::sqrt(box.width() * box.height()) / canonical;
  int exponent = 0;
  std::frexp(ratio, &exponent);
  return k0 + exponent - 1;
}

int select_level(const Box& box, const LevelStrategy& strategy) {
  if (strategy.kind == LevelStrategy::Kind::Fixed) {
    if (strategy.fixed_level < 2 || strategy.fixed_level > 5) {
      throw ConfigError("level strategy: fixed level must be in [2, 5]");
    }
    return strategy.fixed_level;
  }
  return std::clamp(size_based_level_unclamped(box, strategy.k0, strategy.canonical), 2, 5);
}

Var extract_person_features(const FeaturePyramid& pyramid, const Box& box, const LevelStrategy& strategy,
                            double magnification, int output_size, int sampling_ratio) {
  const Box enlarged = enlarge_box(box, magnification);
  const int level = select_level(enlarged, strategy);
  const RoiAlignParams params{1.0 / kLevelStrides[static_cast<std::size_t>(level - 2)], output_size, output_size,
                              sampling_ratio};
  return roi_align(pyramid.level(level), enlarged, params);
}

}  // namespace poseroi
