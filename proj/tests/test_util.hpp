#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "poseroi/grad_check.hpp"
#include "poseroi/keypoint_head.hpp"
#include "poseroi/params.hpp"
#include "poseroi/tensor.hpp"

namespace poseroi::testing {

// Fresh empty directory under the system temp dir, unique per process.
inline std::filesystem::path scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("poseroi_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Random values bounded away from zero (kink-free for relu checks).
inline Tensor random_nonzero_tensor(Shape shape, std::uint64_t seed) {
  Tensor t = random_tensor(std::move(shape), seed);
  for (double& v : t.data()) v = v < 0 ? v - 0.1 : v + 0.1;
  return t;
}

// Straight nested-loop cross-correlation, C x H x W input.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({cout, oh, ow});
  for (int o = 0; o < cout; ++o) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        double s = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
        for (int c = 0; c < cin; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * stride - pad + ky;
              const int ix = xx * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              s += x.at(c, iy, ix) * w[((static_cast<std::size_t>(o) * cin + c) * k + ky) * k + kx];
            }
          }
        }
        out.at(o, y, xx) = s;
      }
    }
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Worst relative error between the binding's gradient for one stored
// parameter and central differences taken by perturbing the store in place.
inline double param_grad_check(ParameterStore store, const std::string& name,
                               const std::function<Var(ParamBinding&)>& f, double eps = 1e-5) {
  ParamBinding binding(store);
  const Var out = f(binding);
  backward(out);
  const Tensor analytic = binding.gradients().at(name);
  Tensor& w = store.at(name);
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double keep = w[i];
    w[i] = keep + eps;
    ParamBinding up(store);
    const double fu = f(up).value()[0];
    w[i] = keep - eps;
    ParamBinding down(store);
    const double fd = f(down).value()[0];
    w[i] = keep;
    const double numeric = (fu - fd) / (2 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Small head for finite-difference checks: 4 channels, 2 attention heads.
inline HeadConfig toy_head_config(HeadVariant variant) {
  HeadConfig c;
  c.variant = variant;
  c.head_channels = 4;
  c.heads = 2;
  return c;
}

// Toy head weights at a point suited to central differences. Fresh heads have
// zero biases, which puts relus exactly on their kinks wherever every input
// channel is dead, and their near-uniform logits leave many input gradients
// around 1e-6, where the roundoff of an O(10) loss differenced at 1e-5
// dominates. Positive biases and doubled convolution weights avoid both.
inline ParameterStore toy_head_store(const HeadConfig& config, std::uint64_t seed) {
  ParameterStore store;
  std::mt19937_64 rng(seed);
  init_head(store, config, 4, rng);
  std::uint64_t s = seed * 1000;
  for (const auto& name : store.names()) {
    Tensor& t = store.at(name);
    if (name.ends_with(".bias")) {
      t = random_tensor(t.shape(), ++s, 0.05, 0.25);
    } else if (name.find(".conv") != std::string::npos) {
      for (double& v : t.data()) v *= 2.0;
    }
  }
  return store;
}

// Targets for all 17 keypoints scattered over a 32 x 32 box.
inline HeatmapTargets toy_targets(std::uint64_t seed) {
  KeypointSet kps{};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(2.0, 30.0);
  for (auto& kp : kps) kp = {u(rng), u(rng), 1.0, 2};
  return encode_targets(kps, {0, 0, 32, 32}, 56, 56);
}

// One toy head, its targets and input: everything a loss-through-head
// gradient check needs, drawn from a single index.
struct HeadCheckPoint {
  HeadConfig config;
  ParameterStore store;
  HeatmapTargets targets;
  Tensor input;

  ScalarFunction loss() const {
    return [this](const Var& in) {
      ParamBinding p(store);
      return keypoint_loss(head_forward(p, config, in), targets).loss;
    };
  }
};

inline HeadCheckPoint toy_head_point(HeadVariant variant, std::uint64_t draw) {
  HeadCheckPoint point{toy_head_config(variant), {}, {}, random_tensor({4, 14, 14}, 14 + draw)};
  point.store = toy_head_store(point.config, 12 + draw);
  point.targets = toy_targets(13 + draw);
  return point;
}

// Smallest |gradient entry| over the rms entry. Central differences of an
// O(10) loss carry about 1e-9 of absolute roundoff at epsilon 1e-5, so a
// coordinate far below the typical gradient cannot meet a 1e-5 relative bound
// however exact the backward pass is.
inline double gradient_conditioning(const ScalarFunction& f, const Tensor& at) {
  const Var x = Var::leaf(at);
  backward(f(x));
  const Tensor grad = x.grad();
  double smallest = INFINITY, squares = 0.0;
  for (double g : grad.data()) {
    smallest = std::min(smallest, std::abs(g));
    squares += g * g;
  }
  return smallest / std::sqrt(squares / static_cast<double>(grad.size()));
}

inline constexpr double kMinConditioning = 1.5e-4;

struct ScreenedCheck {
  std::uint64_t draw = 0;
  GradCheckReport report;
};

struct ScreenedChecks {
  std::vector<ScreenedCheck> accepted;
  int rejected_ill_conditioned = 0;
  int rejected_kinks = 0;
};

// Full-head gradient checks at the first `count` draws from `first_draw` on
// whose point is well conditioned and whose +-epsilon probes stay on one
// linear piece of every relu. Screening never looks at the error itself.
inline ScreenedChecks screened_head_checks(HeadVariant variant, int count, double epsilon,
                                           std::uint64_t first_draw = 0) {
  ScreenedChecks out;
  for (std::uint64_t draw = first_draw; static_cast<int>(out.accepted.size()) < count; ++draw) {
    if (draw > first_draw + 8 * static_cast<std::uint64_t>(count)) break;
    const HeadCheckPoint point = toy_head_point(variant, draw);
    const ScalarFunction f = point.loss();
    if (gradient_conditioning(f, point.input) < kMinConditioning) {
      ++out.rejected_ill_conditioned;
      continue;
    }
    const GradCheckReport report = grad_check_report(f, point.input, epsilon);
    if (report.kink_crossings > 0) {
      ++out.rejected_kinks;
      continue;
    }
    out.accepted.push_back({draw, report});
  }
  return out;
}

}  // namespace poseroi::testing
