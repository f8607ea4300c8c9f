#include <gtest/gtest.h>

#include "poseroi/backbone.hpp"
#include "poseroi/error.hpp"
#include "poseroi/grad_check.hpp"
#include "poseroi/ops.hpp"
#include "test_util.hpp"

namespace poseroi {
namespace {

using testing::random_tensor;

BackboneConfig small_config() {
  BackboneConfig c;
  c.stem_channels = 4;
  c.stage_channels = {4, 6, 8, 10};
  c.convs_per_stage = 2;
  c.fpn_channels = 4;
  return c;
}

ParameterStore make_store(const BackboneConfig& config, std::uint64_t seed) {
  ParameterStore store;
  Rng rng(seed);
  init_backbone(store, config, rng);
  return store;
}

TEST(BackboneTest, StageStrides) {
  const BackboneConfig config;
  const ParameterStore store = make_store(config, 1);
  ParamBinding p(store);
  const StageOutputs out = backbone_forward(p, config, Var::constant(random_tensor({3, 64, 64}, 2, 0.0, 1.0)));
  const int sizes[4] = {16, 8, 4, 2};
  for (int s = 0; s < 4; ++s) {
    EXPECT_EQ(out[static_cast<std::size_t>(s)].shape(),
              (Shape{config.stage_channels[static_cast<std::size_t>(s)], sizes[s], sizes[s]}));
  }
}

TEST(BackboneTest, ZeroWeightsGiveZeroOutputs) {
  const BackboneConfig config = small_config();
  ParameterStore store = make_store(config, 1);
  for (const auto& name : store.names()) store.at(name).fill(0.0);
  ParamBinding p(store);
  const StageOutputs out = backbone_forward(p, config, Var::constant(random_tensor({3, 64, 32}, 3)));
  for (const Var& v : out) EXPECT_EQ(max_abs(v.value()), 0.0);
}

TEST(BackboneTest, DeterministicForFixedSeed) {
  const BackboneConfig config = small_config();
  const ParameterStore a = make_store(config, 9);
  const ParameterStore b = make_store(config, 9);
  EXPECT_EQ(a, b);
  const Tensor image = random_tensor({3, 32, 64}, 4, 0.0, 1.0);
  ParamBinding pa(a), pb(b);
  const StageOutputs oa = backbone_forward(pa, config, Var::constant(image));
  const StageOutputs ob = backbone_forward(pb, config, Var::constant(image));
  for (int s = 0; s < 4; ++s) EXPECT_EQ(oa[static_cast<std::size_t>(s)].value(), ob[static_cast<std::size_t>(s)].value());
}

TEST(BackboneTest, RejectsSizesNotMultipleOf32) {
  const BackboneConfig config = small_config();
  const ParameterStore store = make_store(config, 1);
  ParamBinding p(store);
  try {
    backbone_forward(p, config, Var::constant(Tensor({3, 48, 64})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("multiples of 32"), std::string::npos);
  }
}

StageOutputs random_stages(const BackboneConfig& c, int base, std::uint64_t seed) {
  StageOutputs s;
  for (int i = 0; i < 4; ++i) {
    const int extent = base >> i;
    s[static_cast<std::size_t>(i)] =
        Var::constant(random_tensor({c.stage_channels[static_cast<std::size_t>(i)], extent, extent}, seed + i));
  }
  return s;
}

TEST(FpnTest, ZeroStagesGiveZeroPyramid) {
  const BackboneConfig config = small_config();
  const ParameterStore store = make_store(config, 1);
  ParamBinding p(store);
  StageOutputs stages;
  for (int i = 0; i < 4; ++i) {
    stages[static_cast<std::size_t>(i)] =
        Var::constant(Tensor({config.stage_channels[static_cast<std::size_t>(i)], 16 >> i, 16 >> i}));
  }
  const FeaturePyramid pyr = fpn_fuse(p, stages);
  for (int l = 2; l <= 5; ++l) {
    EXPECT_EQ(pyr.level(l).shape(), (Shape{config.fpn_channels, 16 >> (l - 2), 16 >> (l - 2)}));
    EXPECT_EQ(max_abs(pyr.level(l).value()), 0.0);
  }
}

TEST(FpnTest, P5DependsOnlyOnStage4) {
  const BackboneConfig config = small_config();
  const ParameterStore store = make_store(config, 1);
  ParamBinding p(store);
  StageOutputs stages = random_stages(config, 16, 10);
  const Tensor p5 = fpn_fuse(p, stages).level(5).value();
  for (int i = 0; i < 3; ++i) {
    stages[static_cast<std::size_t>(i)] = Var::constant(Tensor(stages[static_cast<std::size_t>(i)].shape()));
  }
  EXPECT_EQ(fpn_fuse(p, stages).level(5).value(), p5);
}

TEST(FpnTest, RejectsNonHalvingExtents) {
  const BackboneConfig config = small_config();
  const ParameterStore store = make_store(config, 1);
  ParamBinding p(store);
  StageOutputs stages = random_stages(config, 16, 10);
  stages[2] = Var::constant(Tensor({config.stage_channels[2], 3, 3}));
  EXPECT_THROW(fpn_fuse(p, stages), ShapeError);
}

TEST(FpnTest, MatchesStraightLineComposition) {
  const BackboneConfig config = small_config();
  const ParameterStore store = make_store(config, 5);
  ParamBinding p(store);
  const StageOutputs stages = random_stages(config, 16, 20);
  const FeaturePyramid pyr = fpn_fuse(p, stages);

  auto w = [&](const std::string& n) { return Var::constant(store.at(n)); };
  const Var l5 = conv2d(stages[3], w("fpn.lateral5.weight"), w("fpn.lateral5.bias"), 1, 0);
  const Var l4 = conv2d(stages[2], w("fpn.lateral4.weight"), w("fpn.lateral4.bias"), 1, 0);
  const Var l3 = conv2d(stages[1], w("fpn.lateral3.weight"), w("fpn.lateral3.bias"), 1, 0);
  const Var l2 = conv2d(stages[0], w("fpn.lateral2.weight"), w("fpn.lateral2.bias"), 1, 0);
  const Var t4 = add(l4, bilinear_upsample(l5, 2));
  const Var t3 = add(l3, bilinear_upsample(t4, 2));
  const Var t2 = add(l2, bilinear_upsample(t3, 2));
  const Var tops[4] = {t2, t3, t4, l5};
  for (int l = 2; l <= 5; ++l) {
    const std::string name = "fpn.output" + std::to_string(l);
    const Tensor want = conv2d(tops[l - 2], w(name + ".weight"), w(name + ".bias"), 1, 1).value();
    EXPECT_LT(testing::max_abs_diff(pyr.level(l).value(), want), 1e-12);
  }
}

TEST(FpnTest, GradientMatchesFiniteDifferences) {
  const BackboneConfig config = small_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ParameterStore store = make_store(config, 100 + seed);
    const StageOutputs stages = random_stages(config, 8, 200 + seed);
    Tensor weights[4];
    for (int l = 0; l < 4; ++l) weights[l] = random_tensor({config.fpn_channels, 8 >> l, 8 >> l}, 300 + seed + l);
    // Differentiate through stage 2, which feeds P2 and P3.
    const auto f = [&](const Var& x) {
      ParamBinding p(store);
      StageOutputs s = stages;
      s[1] = x;
      const FeaturePyramid pyr = fpn_fuse(p, s);
      Var total = weighted_sum(pyr.level(2), weights[0]);
      for (int l = 3; l <= 5; ++l) total = add(total, weighted_sum(pyr.level(l), weights[l - 2]));
      return total;
    };
    EXPECT_LT(grad_check(f, stages[1].value(), 1e-5), 1e-6);
    // And through the lateral and output weights of P2.
    const auto g = [&](ParamBinding& p) {
      const FeaturePyramid pyr = fpn_fuse(p, stages);
      return add(weighted_sum(pyr.level(2), weights[0]), weighted_sum(pyr.level(3), weights[1]));
    };
    EXPECT_LT(testing::param_grad_check(store, "fpn.lateral2.weight", g), 1e-6);
    EXPECT_LT(testing::param_grad_check(store, "fpn.output2.weight", g), 1e-6);
    EXPECT_LT(testing::param_grad_check(store, "fpn.lateral4.bias", g), 1e-6);
  }
}

TEST(SelectLevelTest, SizeBasedExamples) {
  const LevelStrategy sb = LevelStrategy::size_based();
  EXPECT_EQ(select_level({0, 0, 224, 224}, sb), 4);
  EXPECT_EQ(select_level({0, 0, 56, 56}, sb), 2);
  EXPECT_EQ(select_level({0, 0, 112, 112}, sb), 3);
  EXPECT_EQ(select_level({0, 0, 448, 448}, sb), 5);
  EXPECT_EQ(select_level({0, 0, 4000, 4000}, sb), 5);
  EXPECT_EQ(select_level({0, 0, 4, 4}, sb), 2);
}

TEST(SelectLevelTest, FixedP2EverywhereOnGrid) {
  const LevelStrategy p2 = LevelStrategy::fixed_p2();
  for (double w = 1; w < 2000; w *= 1.37) {
    for (double h = 1; h < 2000; h *= 1.41) EXPECT_EQ(select_level({5, 5, 5 + w, 5 + h}, p2), 2);
  }
  EXPECT_THROW(select_level({0, 0, 1, 1}, LevelStrategy::fixed(6)), ConfigError);
}

TEST(SelectLevelTest, MonotoneAndDoubling) {
  const LevelStrategy sb = LevelStrategy::size_based();
  Rng rng(3);
  std::uniform_real_distribution<double> u(1.0, 900.0);
  for (int i = 0; i < 2000; ++i) {
    const double w = u(rng), h = u(rng);
    const Box box{0, 0, w, h};
    const Box doubled{0, 0, 2 * w, 2 * h};
    EXPECT_EQ(size_based_level_unclamped(doubled, 4, 224.0), size_based_level_unclamped(box, 4, 224.0) + 1);
    const Box bigger{0, 0, w * 1.1, h};
    EXPECT_GE(select_level(bigger, sb), select_level(box, sb));
  }
}

TEST(ExtractTest, EqualsManualComposition) {
  FeaturePyramid pyr;
  for (int l = 0; l < 4; ++l) {
    pyr.levels[static_cast<std::size_t>(l)] = Var::constant(random_tensor({3, 32 >> l, 32 >> l}, 70 + l));
  }
  Rng rng(8);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (const LevelStrategy& s : {LevelStrategy::size_based(), LevelStrategy::fixed_p2(), LevelStrategy::fixed(5)}) {
    for (double mag : {1.0, 1.3}) {
      const double x = u(rng), y = u(rng);
      const Box box{x, y, x + 10 + u(rng), y + 10 + u(rng)};
      const Tensor got = extract_person_features(pyr, box, s, mag).value();
      const Box e = enlarge_box(box, mag);
      const int level = select_level(e, s);
      const Tensor want = roi_align(pyr.level(level), e, {1.0 / (1 << level), 14, 14, 2}).value();
      EXPECT_EQ(got, want);
    }
  }
}

TEST(ExtractTest, MagnificationOneSizeBasedIsPlainRoiAlign) {
  FeaturePyramid pyr;
  for (int l = 0; l < 4; ++l) {
    pyr.levels[static_cast<std::size_t>(l)] = Var::constant(random_tensor({2, 64 >> l, 64 >> l}, 90 + l));
  }
  const Box box{10, 12, 130, 200};  // sqrt(area) ~ 151 -> level 3
  const Tensor got = extract_person_features(pyr, box, LevelStrategy::size_based(), 1.0).value();
  EXPECT_EQ(got, roi_align(pyr.level(3), box, {1.0 / 8, 14, 14, 2}).value());
}

}  // namespace
}  // namespace poseroi
