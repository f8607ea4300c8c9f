#pragma once

#include <random>

#include "poseroi/autograd.hpp"

namespace poseroi {

using Rng = std::mt19937_64;

/// Axis-aligned person box in continuous image pixel coordinates (origin at
/// the top-left image corner). Boxes may extend past the image after
/// enlargement; only sampling deals with that.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 1.0;
  double y2 = 1.0;
  double score = 1.0;
  /// Product of all enlargement factors applied so far.
  double magnification = 1.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  bool operator==(const Box&) const = default;
};

struct ImageSize {
  int width = 1;
  int height = 1;

  bool operator==(const ImageSize&) const = default;
};

/// Scales width and height by `factor` about the box center. No clipping.
/// Throws ConfigError for factor < 1.
Box enlarge_box(const Box& box, double factor);

/// Simulated proposal noise: width and height scaled independently by
/// 1 + U(-scale_noise, scale_noise), center shifted by U(-shift_noise,
/// shift_noise) times the box extent along each axis.
Box jitter_box(const Box& box, double scale_noise, double shift_noise, Rng& rng);

struct RoiAlignParams {
  double spatial_scale = 0.25;
  int output_h = 14;
  int output_w = 14;
  int sampling_ratio = 2;
};

/// Bilinear RoIAlign of one box from a C x H x W feature map.
///
/// The box is mapped to feature coordinates as x * spatial_scale - 0.5
/// (half-pixel alignment). Each output bin averages sampling_ratio^2 bilinear
/// samples at regularly spaced interior points. Taps that fall outside the
/// feature grid read as zero, so regions beyond the image contribute black.
Var roi_align(const Var& feature, const Box& box, const RoiAlignParams& params);

}  // namespace poseroi
