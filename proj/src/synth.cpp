#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <thread>

#include "poseroi/data.hpp"
#include "poseroi/error.hpp"

namespace poseroi {

namespace {

using Rgb = std::array<double, 3>;

constexpr double kHalf = 128.0 / 255.0;
constexpr Rgb kLimbColor = {kHalf, kHalf, kHalf};

// Left and right joints of a pair share a color; which is which follows from
// the figure facing the viewer (its left on the image right), so flipped
// images stay consistent with their swapped labels.
constexpr std::array<Rgb, kNumKeypoints> kJointColors = {{
    {1, 0, 0},                          // nose
    {0, 1, 0},         {0, 1, 0},       // eyes
    {0, 0, 1},         {0, 0, 1},       // ears
    {1, 1, 0},         {1, 1, 0},       // shoulders
    {1, 0, 1},         {1, 0, 1},       // elbows
    {0, 1, 1},         {0, 1, 1},       // wrists
    {1, kHalf, 0},     {1, kHalf, 0},   // hips
    {kHalf, 0, 1},     {kHalf, 0, 1},   // knees
    {0, kHalf, 1},     {0, kHalf, 1},   // ankles
}};

constexpr std::array<std::array<int, 2>, 16> kLimbs = {{{5, 6},
                                                         {5, 7},
                                                         {7, 9},
                                                         {6, 8},
                                                         {8, 10},
                                                         {5, 11},
                                                         {6, 12},
                                                         {11, 12},
                                                         {11, 13},
                                                         {13, 15},
                                                         {12, 14},
                                                         {14, 16},
                                                         {0, 1},
                                                         {0, 2},
                                                         {1, 3},
                                                         {2, 4}}};

struct Point {
  double x = 0.0, y = 0.0;
};

struct Capsule {
  Point a, b;
  double radius;
};

// A posed figure in pixels, before placement.
struct Figure {
  std::array<Point, kNumKeypoints> joints;
  std::vector<Capsule> blobs;  // head, hands, feet
  Point head_center;
  double head_radius = 0.0;
  double joint_radius = 0.0;
  bool edge_posed = false;
  Box box;
};

double dyadic(double v) { return std::round(v * 8.0) / 8.0; }

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Figure pose_figure(Rng& rng, double height, bool edge_posed) {
  Figure f;
  f.edge_posed = edge_posed;
  const double ws = uniform(rng, 0.85, 1.2);
  auto& j = f.joints;
  j[0] = {0.0, 0.09};
  j[1] = {0.03 * ws, 0.07};
  j[2] = {-0.03 * ws, 0.07};
  j[3] = {0.06 * ws, 0.085};
  j[4] = {-0.06 * ws, 0.085};
  j[5] = {0.11 * ws, 0.2};
  j[6] = {-0.11 * ws, 0.2};
  j[11] = {0.08 * ws, 0.52};
  j[12] = {-0.08 * ws, 0.52};
  f.head_center = {0.0, 0.08};
  f.head_radius = 0.075;

  std::array<double, 2> wrist_dir{}, ankle_dir{};
  for (int side = 0; side < 2; ++side) {
    const double s = side == 0 ? 1.0 : -1.0;
    const int shoulder = 5 + side, elbow = 7 + side, wrist = 9 + side;
    const int hip = 11 + side, knee = 13 + side, ankle = 15 + side;
    const double a = edge_posed ? uniform(rng, 1.3, 1.8) : uniform(rng, 0.1, 1.4);
    const double b = edge_posed ? a + uniform(rng, -0.2, 0.2) : a + uniform(rng, -0.6, 0.9);
    j[elbow] = {j[shoulder].x + 0.16 * s * std::sin(a), j[shoulder].y + 0.16 * std::cos(a)};
    j[wrist] = {j[elbow].x + 0.15 * s * std::sin(b), j[elbow].y + 0.15 * std::cos(b)};
    const double c = uniform(rng, 0.0, 0.35);
    const double d = c + uniform(rng, -0.25, 0.15);
    j[knee] = {j[hip].x + 0.22 * s * std::sin(c), j[hip].y + 0.22 * std::cos(c)};
    j[ankle] = {j[knee].x + 0.21 * s * std::sin(d), j[knee].y + 0.21 * std::cos(d)};
    wrist_dir[side] = b;
    ankle_dir[side] = s;
  }

  for (Point& p : j) p = {dyadic(p.x * height), dyadic(p.y * height)};
  f.head_center = {dyadic(f.head_center.x * height), dyadic(f.head_center.y * height)};
  f.head_radius = dyadic(f.head_radius * height);
  f.joint_radius = dyadic(std::max(1.25, 0.03 * height));

  const double blob = std::max(1.0, 0.04 * height);
  f.blobs.push_back({f.head_center, f.head_center, f.head_radius});
  if (!edge_posed) {
    for (int side = 0; side < 2; ++side) {
      const double s = ankle_dir[side];
      const Point w = j[9 + side], a = j[15 + side];
      const double b = wrist_dir[side];
      f.blobs.push_back({w, {dyadic(w.x + 0.07 * height * s * std::sin(b)), dyadic(w.y + 0.07 * height * std::cos(b))},
                         blob});
      f.blobs.push_back({a, {dyadic(a.x + 0.05 * height * s), dyadic(a.y + 0.075 * height)}, blob});
    }
  }

  // Tight box. Regular figures enclose every drawn pixel; edge-posed ones are
  // cut at their keypoints, so joint discs spill over the border.
  double x1 = INFINITY, y1 = INFINITY, x2 = -INFINITY, y2 = -INFINITY;
  const auto include = [&](Point p, double r) {
    x1 = std::min(x1, p.x - r);
    y1 = std::min(y1, p.y - r);
    x2 = std::max(x2, p.x + r);
    y2 = std::max(y2, p.y + r);
  };
  const double pad = edge_posed ? 0.0 : f.joint_radius;
  for (const Point& p : j) include(p, pad);
  include(f.head_center, f.head_radius);
  if (!edge_posed) {
    for (const Capsule& c : f.blobs) {
      include(c.a, dyadic(c.radius));
      include(c.b, dyadic(c.radius));
    }
  }
  f.box = {x1, y1, x2, y2};
  return f;
}

Figure placed(const Figure& f, double dx, double dy) {
  Figure out = f;
  for (Point& p : out.joints) p = {p.x + dx, p.y + dy};
  for (Capsule& c : out.blobs) {
    c.a = {c.a.x + dx, c.a.y + dy};
    c.b = {c.b.x + dx, c.b.y + dy};
  }
  out.head_center = {f.head_center.x + dx, f.head_center.y + dy};
  out.box = {f.box.x1 + dx, f.box.y1 + dy, f.box.x2 + dx, f.box.y2 + dy};
  return out;
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

void paint(Tensor& image, const Capsule& c, const Rgb& color) {
  const int h = image.dim(1), w = image.dim(2);
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(c.a.x, c.b.x) - c.radius)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(c.a.x, c.b.x) + c.radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(c.a.y, c.b.y) - c.radius)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(c.a.y, c.b.y) + c.radius)));
  const double vx = c.b.x - c.a.x, vy = c.b.y - c.a.y;
  const double len2 = vx * vx + vy * vy;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double px = x + 0.5 - c.a.x, py = y + 0.5 - c.a.y;
      const double t = len2 > 0.0 ? std::clamp((px * vx + py * vy) / len2, 0.0, 1.0) : 0.0;
      const double ex = px - t * vx, ey = py - t * vy;
      if (ex * ex + ey * ey <= c.radius * c.radius) {
        for (int ch = 0; ch < 3; ++ch) image.at(ch, y, x) = color[static_cast<std::size_t>(ch)];
      }
    }
  }
}

double pick_height(const SynthConfig& config, Rng& rng) {
  const double s = config.image_size;
  const double total = config.scale_mix.small + config.scale_mix.medium + config.scale_mix.large;
  const double u = uniform(rng, 0.0, total);
  if (u < config.scale_mix.small) return uniform(rng, 24.0, 40.0);
  if (u < config.scale_mix.small + config.scale_mix.medium) return uniform(rng, 52.0, std::max(56.0, 0.9 * s));
  return uniform(rng, 0.75 * s, 0.95 * s);
}

ImageRecord render_image(const SynthConfig& config, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    static_cast<std::uint32_t>(index)};
  Rng rng(seq);
  const int size = config.image_size;

  ImageRecord r;
  r.id = index + 1;
  char name[32];
  std::snprintf(name, sizeof name, "%06d.ppm", r.id);
  r.file_name = name;
  r.size = {size, size};
  r.pixels = Tensor({3, size, size});

  const int persons = std::uniform_int_distribution<int>(config.min_persons, config.max_persons)(rng);
  std::vector<Figure> figures;
  for (int p = 0; p < persons; ++p) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const bool edge = uniform(rng, 0.0, 1.0) < config.edge_keypoint_bias;
      double height = pick_height(config, rng);
      Figure f = pose_figure(rng, height, edge);
      // Shrink figures that do not fit the canvas.
      while (f.box.width() > size - 2 || f.box.height() > size - 2) {
        height *= 0.9;
        f = pose_figure(rng, height, edge);
      }
      const double dx = dyadic(uniform(rng, 1.0 - f.box.x1, size - 1.0 - f.box.x2));
      const double dy = dyadic(uniform(rng, 1.0 - f.box.y1, size - 1.0 - f.box.y2));
      Figure g = placed(f, dx, dy);
      const bool crowded =
          std::any_of(figures.begin(), figures.end(), [&](const Figure& o) { return iou(o.box, g.box) > 0.2; });
      if (crowded) continue;
      figures.push_back(std::move(g));
      break;
    }
  }
  if (figures.empty()) {
    Figure f = pose_figure(rng, 48.0, false);
    figures.push_back(placed(f, dyadic(0.5 * size - f.box.center_x()), dyadic(0.5 * size - f.box.center_y())));
  }

  int next = 0;
  for (const Figure& f : figures) {
    const double thickness = 0.5 * config.limb_thickness;
    for (const auto& [a, b] : kLimbs) paint(r.pixels, {f.joints[a], f.joints[b], thickness}, kLimbColor);
    for (const Capsule& c : f.blobs) paint(r.pixels, c, kLimbColor);

    Annotation ann;
    ann.id = r.id * 100 + next++;
    ann.box = f.box;
    ann.area = f.box.area();
    for (int k = 0; k < kNumKeypoints; ++k) {
      const bool occluded = uniform(rng, 0.0, 1.0) < config.occlusion_probability;
      ann.keypoints[k] = {f.joints[k].x, f.joints[k].y, 1.0, occluded ? 1 : 2};
      if (!occluded) paint(r.pixels, {f.joints[k], f.joints[k], f.joint_radius}, kJointColors[k]);
    }
    r.annotations.push_back(ann);
  }
  return r;
}

}  // namespace

void SynthConfig::validate() const {
  const auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("synth: ") + name + " must lie in [0, 1]");
  };
  if (image_count < 1) throw ConfigError("synth: image_count must be positive");
  if (image_size < 64) throw ConfigError("synth: image_size must be at least 64");
  if (min_persons < 1 || max_persons < min_persons) throw ConfigError("synth: need 1 <= min_persons <= max_persons");
  if (!(limb_thickness > 0.0)) throw ConfigError("synth: limb_thickness must be positive");
  prob(edge_keypoint_bias, "edge_keypoint_bias");
  prob(occlusion_probability, "occlusion_probability");
  if (!(scale_mix.small >= 0 && scale_mix.medium >= 0 && scale_mix.large >= 0) ||
      !(scale_mix.small + scale_mix.medium + scale_mix.large > 0)) {
    throw ConfigError("synth: scale mix weights must be non-negative and not all zero");
  }
}

Dataset synth_generate(const SynthConfig& config, int threads) {
  config.validate();
  Dataset out;
  out.images.resize(static_cast<std::size_t>(config.image_count));
  const int workers = std::clamp(threads, 1, config.image_count);
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (int i = t; i < config.image_count; i += workers) out.images[static_cast<std::size_t>(i)] = render_image(config, i);
      });
    }
  }
  return out;
}

}  // namespace poseroi
