#include <gtest/gtest.h>

#include <cmath>

#include "poseroi/error.hpp"
#include "poseroi/geometry.hpp"
#include "poseroi/grad_check.hpp"
#include "poseroi/ops.hpp"
#include "test_util.hpp"

namespace poseroi {
namespace {

using testing::random_tensor;

// Value of the zero-extended bilinear field at continuous grid coordinates.
double zero_padded_bilinear(const Tensor& f, int c, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double ly = y - y0;
  const double lx = x - x0;
  auto tap = [&](int yy, int xx) {
    if (yy < 0 || yy >= f.dim(1) || xx < 0 || xx >= f.dim(2)) return 0.0;
    return f.at(c, yy, xx);
  };
  return (1 - ly) * ((1 - lx) * tap(y0, x0) + lx * tap(y0, x0 + 1)) +
         ly * ((1 - lx) * tap(y0 + 1, x0) + lx * tap(y0 + 1, x0 + 1));
}

// Dense sampler: averages `dense` x `dense` evenly spaced samples per bin.
Tensor dense_roi_oracle(const Tensor& f, const Box& box, const RoiAlignParams& p, int dense) {
  Tensor out({f.dim(0), p.output_h, p.output_w});
  const double x0 = box.x1 * p.spatial_scale - 0.5;
  const double y0 = box.y1 * p.spatial_scale - 0.5;
  const double bw = box.width() * p.spatial_scale / p.output_w;
  const double bh = box.height() * p.spatial_scale / p.output_h;
  for (int c = 0; c < f.dim(0); ++c) {
    for (int by = 0; by < p.output_h; ++by) {
      for (int bx = 0; bx < p.output_w; ++bx) {
        double acc = 0.0;
        for (int sy = 0; sy < dense; ++sy) {
          for (int sx = 0; sx < dense; ++sx) {
            acc += zero_padded_bilinear(f, c, y0 + (by + (sy + 0.5) / dense) * bh, x0 + (bx + (sx + 0.5) / dense) * bw);
          }
        }
        out.at(c, by, bx) = acc / (dense * dense);
      }
    }
  }
  return out;
}

TEST(EnlargeBoxTest, CenterPreservingArithmetic) {
  const Box a = enlarge_box({10, 20, 110, 220}, 1.3);
  EXPECT_DOUBLE_EQ(a.x1, -5.0);
  EXPECT_DOUBLE_EQ(a.y1, -10.0);
  EXPECT_DOUBLE_EQ(a.x2, 125.0);
  EXPECT_DOUBLE_EQ(a.y2, 250.0);
  const Box b = enlarge_box({0, 0, 100, 100}, 1.3);
  EXPECT_DOUBLE_EQ(b.x1, -15.0);
  EXPECT_DOUBLE_EQ(b.y1, -15.0);
  EXPECT_DOUBLE_EQ(b.x2, 115.0);
  EXPECT_DOUBLE_EQ(b.y2, 115.0);
  EXPECT_DOUBLE_EQ(b.magnification, 1.3);
}

TEST(EnlargeBoxTest, IdentityAndRejectsShrinking) {
  const Box box{3.25, -7.5, 40.125, 19.0, 0.8};
  EXPECT_EQ(enlarge_box(box, 1.0), box);
  EXPECT_THROW(enlarge_box(box, 0.99), ConfigError);
}

TEST(EnlargeBoxTest, PreservesCenterAndAspectOnRandomGrid) {
  Rng rng(7);
  std::uniform_real_distribution<double> pos(-200.0, 800.0);
  std::uniform_real_distribution<double> size(1.0, 400.0);
  std::uniform_real_distribution<double> factor(1.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = pos(rng), y = pos(rng);
    const Box box{x, y, x + size(rng), y + size(rng)};
    const double f = factor(rng);
    const Box out = enlarge_box(box, f);
    EXPECT_NEAR(out.center_x(), box.center_x(), 1e-12 * std::max(1.0, std::abs(box.center_x())));
    EXPECT_NEAR(out.center_y(), box.center_y(), 1e-12 * std::max(1.0, std::abs(box.center_y())));
    EXPECT_NEAR(out.width() / out.height(), box.width() / box.height(),
                1e-12 * box.width() / box.height());
  }
}

TEST(JitterBoxTest, ZeroNoiseIsIdentity) {
  Rng rng(1);
  const Box box{1, 2, 30, 40};
  EXPECT_EQ(jitter_box(box, 0.0, 0.0, rng), box);
  EXPECT_THROW(jitter_box(box, 0.6, 0.0, rng), ConfigError);
}

TEST(JitterBoxTest, ScaleNoiseBound) {
  Rng rng(2);
  const Box box{0, 0, 50, 80};
  for (int i = 0; i < 1000; ++i) {
    const Box j = jitter_box(box, 0.1, 0.05, rng);
    EXPECT_TRUE(j.valid());
    EXPECT_GE(j.width(), 0.9 * 50 - 1e-12);
    EXPECT_LE(j.width(), 1.1 * 50 + 1e-12);
  }
}

TEST(JitterBoxTest, MeanCenterShiftIsZero) {
  Rng rng(3);
  const Box box{10, 10, 110, 60};
  const int n = 10000;
  double sx = 0.0, sxx = 0.0, sy = 0.0, syy = 0.0;
  for (int i = 0; i < n; ++i) {
    const Box j = jitter_box(box, 0.1, 0.2, rng);
    const double dx = j.center_x() - box.center_x();
    const double dy = j.center_y() - box.center_y();
    sx += dx, sxx += dx * dx, sy += dy, syy += dy * dy;
  }
  const double mx = sx / n, my = sy / n;
  const double se_x = std::sqrt((sxx / n - mx * mx) / n);
  const double se_y = std::sqrt((syy / n - my * my) / n);
  EXPECT_LT(std::abs(mx), 3 * se_x);
  EXPECT_LT(std::abs(my), 3 * se_y);
}

Tensor affine_field(int channels, int h, int w) {
  Tensor f({channels, h, w});
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) f.at(c, y, x) = 2.0 * x + 3.0 * y + c;
    }
  }
  return f;
}

TEST(RoiAlignTest, ExactOnAffineFieldForInteriorBoxes) {
  const Tensor f = affine_field(2, 20, 24);
  const RoiAlignParams p{0.25, 7, 5, 2};
  Rng rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    // Keep all samples inside [0, W-1] x [0, H-1] in feature coordinates.
    const double x1 = 4.0 + 30.0 * u(rng), y1 = 4.0 + 30.0 * u(rng);
    const Box box{x1, y1, x1 + 8.0 + 40.0 * u(rng), y1 + 8.0 + 30.0 * u(rng)};
    const Tensor out = roi_align(Var::constant(f), box, p).value();
    const double bw = box.width() * 0.25 / p.output_w;
    const double bh = box.height() * 0.25 / p.output_h;
    for (int c = 0; c < 2; ++c) {
      for (int by = 0; by < p.output_h; ++by) {
        for (int bx = 0; bx < p.output_w; ++bx) {
          const double mean_x = box.x1 * 0.25 - 0.5 + (bx + 0.5) * bw;
          const double mean_y = box.y1 * 0.25 - 0.5 + (by + 0.5) * bh;
          EXPECT_NEAR(out.at(c, by, bx), 2.0 * mean_x + 3.0 * mean_y + c, 1e-9);
        }
      }
    }
  }
}

TEST(RoiAlignTest, ConstantFieldInsideBox) {
  const Tensor f({3, 10, 10}, 0.625);
  const Tensor out = roi_align(Var::constant(f), {5, 6, 30, 33}, {0.25, 14, 14, 2}).value();
  for (double v : out.data()) EXPECT_NEAR(v, 0.625, 1e-15);
}

TEST(RoiAlignTest, OutOfImageRegionsAreBlack) {
  Tensor f({1, 16, 16});
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) f.at(0, y, x) = 0.5 + 0.3 * std::sin(0.3 * x) * std::cos(0.2 * y);
  }
  const RoiAlignParams p{0.25, 14, 14, 2};
  const Box box = enlarge_box({0, 0, 40, 40}, 1.5);  // (-10, -10, 50, 50) at the image corner
  const Tensor out = roi_align(Var::constant(f), box, p).value();
  const Tensor oracle = dense_roi_oracle(f, box, p, 64);
  // Bin 0 covers feature coordinates [-3, -1.93]: every tap is outside.
  for (int i = 0; i < 14; ++i) {
    EXPECT_EQ(out.at(0, 0, i), 0.0);
    EXPECT_EQ(out.at(0, i, 0), 0.0);
  }
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_LT(std::abs(out[i] - oracle[i]), 2e-2) << i;
}

TEST(RoiAlignTest, AllZeroFeatureGivesZero) {
  const Tensor f({2, 8, 8});
  Rng rng(5);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int i = 0; i < 20; ++i) {
    const double x = u(rng), y = u(rng);
    EXPECT_EQ(max_abs(roi_align(Var::constant(f), {x, y, x + 30, y + 45}, {}).value()), 0.0);
  }
}

TEST(RoiAlignTest, DegenerateBoxRejected) {
  const Var f = Var::constant(Tensor({1, 8, 8}));
  EXPECT_THROW(roi_align(f, {1.0, 1.0, 1.0 + 1e-7, 5.0}, {}), ShapeError);
  EXPECT_THROW(roi_align(f, {1.0, 1.0, 5.0, 5.0}, {0.25, 14, 14, 0}), ConfigError);
}

TEST(RoiAlignTest, LinearInFeature) {
  const Tensor a = random_tensor({2, 12, 12}, 21);
  const Tensor b = random_tensor({2, 12, 12}, 22);
  Tensor ab = a;
  ab.accumulate(b, -2.0);
  const Box box{-6, 3, 41, 52};
  Tensor lhs = roi_align(Var::constant(ab), box, {}).value();
  Tensor rhs = roi_align(Var::constant(a), box, {}).value();
  rhs.accumulate(roi_align(Var::constant(b), box, {}).value(), -2.0);
  EXPECT_LT(testing::max_abs_diff(lhs, rhs), 1e-12);
}

TEST(RoiAlignTest, TranslationInvariantByWholeCells) {
  const Tensor f = random_tensor({2, 20, 20}, 31);
  const int shift_x = 3, shift_y = 2;
  Tensor moved({2, 20, 20});
  for (int c = 0; c < 2; ++c) {
    for (int y = shift_y; y < 20; ++y) {
      for (int x = shift_x; x < 20; ++x) moved.at(c, y, x) = f.at(c, y - shift_y, x - shift_x);
    }
  }
  const Box box{6.5, 5.25, 41.0, 47.75};
  const Box moved_box{box.x1 + 4 * shift_x, box.y1 + 4 * shift_y, box.x2 + 4 * shift_x, box.y2 + 4 * shift_y};
  const Tensor a = roi_align(Var::constant(f), box, {}).value();
  const Tensor b = roi_align(Var::constant(moved), moved_box, {}).value();
  EXPECT_LT(testing::max_abs_diff(a, b), 1e-10);
}

TEST(RoiAlignTest, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor t = random_tensor({2, 6, 6}, 40 + seed);
    const Box box{-5.0 + seed, 2.0, 30.0 + 2 * seed, 27.5};
    const auto f = [&](const Var& v) { return weighted_sum(roi_align(v, box, {0.25, 6, 6, 2}), t); };
    EXPECT_LT(grad_check(f, random_tensor({2, 8, 8}, 50 + seed), 1e-5), 1e-6);
  }
}

}  // namespace
}  // namespace poseroi
