#include "poseroi/geometry.hpp"

#include <cmath>
#include <string>

#include "poseroi/error.hpp"

namespace poseroi {

Box enlarge_box(const Box& box, double factor) {
  if (!(factor >= 1.0)) {
    throw ConfigError("enlarge_box: factor must be >= 1, got " + std::to_string(factor));
  }
  if (factor == 1.0) return box;
  const double cx = box.center_x();
  const double cy = box.center_y();
  const double half_w = 0.5 * box.width() * factor;
  const double half_h = 0.5 * box.height() * factor;
  Box out = box;
  out.x1 = cx - half_w;
  out.x2 = cx + half_w;
  out.y1 = cy - half_h;
  out.y2 = cy + half_h;
  out.magnification = box.magnification * factor;
  return out;
}

Box jitter_box(const Box& box, double scale_noise, double shift_noise, Rng& rng) {
  if (!(scale_noise >= 0.0 && scale_noise <= 0.5) || !(shift_noise >= 0.0 && shift_noise <= 0.5)) {
    throw ConfigError("jitter_box: noise magnitudes must lie in [0, 0.5]");
  }
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double sw = unit(rng);
  const double sh = unit(rng);
  const double dx = unit(rng);
  const double dy = unit(rng);
  if (scale_noise == 0.0 && shift_noise == 0.0) return box;

  const double w = box.width() * (1.0 + scale_noise * sw);
  const double h = box.height() * (1.0 + scale_noise * sh);
  const double cx = box.center_x() + shift_noise * dx * box.width();
  const double cy = box.center_y() + shift_noise * dy * box.height();
  Box out = box;
  out.x1 = cx - 0.5 * w;
  out.x2 = cx + 0.5 * w;
  out.y1 = cy - 0.5 * h;
  out.y2 = cy + 0.5 * h;
  return out;
}

namespace {

struct Tap {
  std::size_t offset;  // y * W + x within one channel plane
  double weight;
};

// Bilinear taps of every output bin, shared by all channels. Taps outside the
// grid are dropped, which is the same as reading zeros there.
std::vector<std::vector<Tap>> sampling_taps(int height, int width, const Box& box, const RoiAlignParams& p) {
  const double x0 = box.x1 * p.spatial_scale - 0.5;
  const double y0 = box.y1 * p.spatial_scale - 0.5;
  const double roi_w = box.width() * p.spatial_scale;
  const double roi_h = box.height() * p.spatial_scale;
  if (!(roi_w >= 1e-6) || !(roi_h >= 1e-6)) {
    throw ShapeError("roi_align: degenerate box after scaling (span " + std::to_string(std::min(roi_w, roi_h)) + ")");
  }
  const double bin_w = roi_w / p.output_w;
  const double bin_h = roi_h / p.output_h;
  const int sr = p.sampling_ratio;
  const double norm = 1.0 / (sr * sr);

  std::vector<std::vector<Tap>> bins(static_cast<std::size_t>(p.output_h) * p.output_w);
  for (int by = 0; by < p.output_h; ++by) {
    for (int bx = 0; bx < p.output_w; ++bx) {
      auto& taps = bins[static_cast<std::size_t>(by) * p.output_w + bx];
      for (int sy = 0; sy < sr; ++sy) {
        const double y = y0 + (by + (sy + 0.5) / sr) * bin_h;
        const double fy = std::floor(y);
        const int iy = static_cast<int>(fy);
        const double ly = y - fy;
        for (int sx = 0; sx < sr; ++sx) {
          const double x = x0 + (bx + (sx + 0.5) / sr) * bin_w;
          const double fx = std::floor(x);
          const int ix = static_cast<int>(fx);
          const double lx = x - fx;
          const int ys[2] = {iy, iy + 1};
          const int xs[2] = {ix, ix + 1};
          const double wy[2] = {1.0 - ly, ly};
          const double wx[2] = {1.0 - lx, lx};
          for (int a = 0; a < 2; ++a) {
            if (ys[a] < 0 || ys[a] >= height) continue;
            for (int b = 0; b < 2; ++b) {
              if (xs[b] < 0 || xs[b] >= width) continue;
              const double w = wy[a] * wx[b] * norm;
              if (w != 0.0) {
                taps.push_back({static_cast<std::size_t>(ys[a]) * width + xs[b], w});
              }
            }
          }
        }
      }
    }
  }
  return bins;
}

}  // namespace

Var roi_align(const Var& feature, const Box& box, const RoiAlignParams& params) {
  if (feature.value().rank() != 3) {
    throw ShapeError("roi_align: feature must be C x H x W, got " + to_string(feature.shape()));
  }
  if (params.sampling_ratio < 1) throw ConfigError("roi_align: sampling_ratio must be >= 1");
  if (params.output_h < 1 || params.output_w < 1) throw ConfigError("roi_align: output size must be >= 1");
  if (!(params.spatial_scale > 0.0)) throw ConfigError("roi_align: spatial_scale must be positive");
  if (!box.valid()) throw ShapeError("roi_align: box must satisfy x2 > x1 and y2 > y1");

  const Tensor& f = feature.value();
  const int channels = f.dim(0);
  const std::size_t plane = static_cast<std::size_t>(f.dim(1)) * f.dim(2);
  auto bins = sampling_taps(f.dim(1), f.dim(2), box, params);

  const std::size_t out_plane = bins.size();
  Tensor out({channels, params.output_h, params.output_w}, 0.0);
  for (int c = 0; c < channels; ++c) {
    const double* src = f.ptr() + c * plane;
    double* dst = out.ptr() + c * out_plane;
    for (std::size_t b = 0; b < out_plane; ++b) {
      double acc = 0.0;
      for (const Tap& t : bins[b]) acc += t.weight * src[t.offset];
      dst[b] = acc;
    }
  }

  return Var::make(std::move(out), {feature},
                   [bins = std::move(bins), channels, plane, out_plane](detail::Node& self) {
                     auto& in = *self.inputs[0];
                     Tensor grad(in.value.shape(), 0.0);
                     for (int c = 0; c < channels; ++c) {
                       double* dst = grad.ptr() + c * plane;
                       const double* g = self.grad.ptr() + c * out_plane;
                       for (std::size_t b = 0; b < out_plane; ++b) {
                         for (const Tap& t : bins[b]) dst[t.offset] += t.weight * g[b];
                       }
                     }
                     accumulate_grad(in, std::move(grad));
                   });
}

}  // namespace poseroi
