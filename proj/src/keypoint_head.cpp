#include "poseroi/keypoint_head.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "poseroi/error.hpp"
#include "poseroi/ops.hpp"

namespace poseroi {

std::string to_string(HeadVariant variant) {
  switch (variant) {
    case HeadVariant::Baseline8Conv:
      return "baseline8conv";
    case HeadVariant::GcmSeries:
      return "gcm_series";
    case HeadVariant::GcmParallel:
      return "gcm_parallel";
  }
  return "unknown";
}

HeadVariant parse_head_variant(const std::string& text) {
  // Case and underscores are ignored, so "GcmSeries" names gcm_series.
  const auto folded = [](std::string_view s) {
    std::string out;
    for (char c : s) {
      if (c != '_') out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
  };
  for (HeadVariant v : {HeadVariant::Baseline8Conv, HeadVariant::GcmSeries, HeadVariant::GcmParallel}) {
    if (folded(to_string(v)) == folded(text)) return v;
  }
  throw ConfigError("unknown head variant '" + text + "' (expected baseline8conv, gcm_series or gcm_parallel)");
}

std::string to_string(TargetKind kind) { return kind == TargetKind::OneHot ? "one_hot" : "gaussian"; }

TargetKind parse_target_kind(const std::string& text) {
  if (text == "one_hot") return TargetKind::OneHot;
  if (text == "gaussian") return TargetKind::Gaussian;
  throw ConfigError("unknown target kind '" + text + "' (expected one_hot or gaussian)");
}

void HeadConfig::validate(int in_channels) const {
  if (head_channels < 1 || heads < 1 || input_size < 1) throw ConfigError("head: sizes must be positive");
  if (heatmap_size != 4 * input_size) {
    throw ConfigError("head: heatmap_size must be 4 * input_size (deconv x2 then bilinear x2)");
  }
  if (variant == HeadVariant::Baseline8Conv) return;
  if (in_channels % heads != 0 || head_channels % heads != 0) {
    throw ConfigError("head: channel widths must be divisible by the attention head count");
  }
  if (variant == HeadVariant::GcmParallel && in_channels != head_channels) {
    throw ConfigError("head: parallel fusion sums branches, so input channels must equal head_channels");
  }
  if (!(gaussian_sigma > 0.0)) throw ConfigError("head: gaussian_sigma must be positive");
}

// ---------------------------------------------------------------------------
// Global context block

void init_gcm(ParameterStore& store, const std::string& prefix, int channels, int height, int width, Rng& rng) {
  const double proj = 1.0 / std::sqrt(static_cast<double>(channels));
  store.add(prefix + ".query", uniform({channels, channels}, proj, rng));
  store.add(prefix + ".key", uniform({channels, channels}, proj, rng));
  store.add(prefix + ".value", he_uniform({channels, channels}, rng));
  store.add(prefix + ".rel_h", uniform({channels, height}, proj, rng));
  store.add(prefix + ".rel_w", uniform({channels, width}, proj, rng));
  store.add(prefix + ".conv.weight", he_uniform({channels, channels, 3, 3}, rng));
  store.add(prefix + ".conv.bias", Tensor({channels}, 0.0));
}

GcmBlock bind_gcm(ParamBinding& params, const std::string& prefix, int heads) {
  return {params(prefix + ".query"),  params(prefix + ".key"),         params(prefix + ".value"),
          params(prefix + ".rel_h"),  params(prefix + ".rel_w"),       params(prefix + ".conv.weight"),
          params(prefix + ".conv.bias"), heads};
}

MhsaResult mhsa(const Var& features, const GcmBlock& block) {
  const Shape& shape = features.shape();
  if (shape.size() != 3) throw ShapeError("mhsa: features must be C x h x w, got " + to_string(shape));
  const int channels = shape[0];
  const int h = shape[1];
  const int w = shape[2];
  if (block.heads < 1 || channels % block.heads != 0) {
    throw ShapeError("mhsa: " + std::to_string(channels) + " channels cannot be split across " +
                     std::to_string(block.heads) + " heads");
  }
  if (block.query.shape() != Shape{channels, channels} || block.key.shape() != Shape{channels, channels} ||
      block.value.shape() != Shape{channels, channels}) {
    throw ShapeError("mhsa: projections must be " + std::to_string(channels) + " x " + std::to_string(channels));
  }
  if (block.rel_h.shape() != Shape{channels, h} || block.rel_w.shape() != Shape{channels, w}) {
    throw ShapeError("mhsa: position encodings must be C x h and C x w for a " + to_string(shape) + " input");
  }
  const int d = channels / block.heads;
  const Var x = reshape(features, {channels, h * w});
  const Var q = scale(matmul(block.query, x), 1.0 / std::sqrt(static_cast<double>(d)));
  const Var k = matmul(block.key, x);
  const Var v = matmul(block.value, x);
  // Content-content and content-position terms share the query: q^T (k + r).
  const Var keys = add(k, broadcast_sum_hw(block.rel_h, block.rel_w));

  MhsaResult result;
  std::vector<Var> outputs;
  for (int head = 0; head < block.heads; ++head) {
    const int lo = head * d;
    const int hi = lo + d;
    const Var logits = matmul(transpose(slice_rows(q, lo, hi)), slice_rows(keys, lo, hi));
    const Var attention = softmax_rows(logits);
    outputs.push_back(matmul(slice_rows(v, lo, hi), transpose(attention)));
    result.attention.push_back(attention);
  }
  result.output = reshape(block.heads == 1 ? outputs.front() : concat_rows(outputs), {channels, h, w});
  return result;
}

Var mhsa_forward(const Var& features, const GcmBlock& block) { return mhsa(features, block).output; }

namespace {

Var gcm_residual(const Var& features, const GcmBlock& block) {
  return add(features, conv2d(mhsa_forward(features, block), block.conv_weight, block.conv_bias, 1, 1));
}

std::string head_conv(int index) { return "head.conv" + std::to_string(index); }
std::string block_prefix(int rep) { return "head.block" + std::to_string(rep); }
std::string block_conv(int rep, int index) { return block_prefix(rep) + ".conv" + std::to_string(index); }

void add_conv(ParameterStore& store, const std::string& name, int cout, int cin, Rng& rng) {
  store.add(name + ".weight", he_uniform({cout, cin, 3, 3}, rng));
  store.add(name + ".bias", Tensor({cout}, 0.0));
}

Var conv_relu(ParamBinding& p, const std::string& name, const Var& x) {
  return relu(conv2d(x, p(name + ".weight"), p(name + ".bias"), 1, 1));
}

constexpr int kRepetitions = 2;
constexpr int kConvsPerRepetition = 4;
constexpr int kBaselineConvs = 8;

}  // namespace

Var gcm_forward(const Var& features, const GcmBlock& block) { return relu(gcm_residual(features, block)); }

// ---------------------------------------------------------------------------
// Head

void init_head(ParameterStore& store, const HeadConfig& config, int in_channels, Rng& rng) {
  config.validate(in_channels);
  const int hc = config.head_channels;
  if (config.variant == HeadVariant::Baseline8Conv) {
    for (int i = 0; i < kBaselineConvs; ++i) add_conv(store, head_conv(i), hc, i == 0 ? in_channels : hc, rng);
  } else {
    int channels = in_channels;
    for (int rep = 0; rep < kRepetitions; ++rep) {
      init_gcm(store, block_prefix(rep) + ".gcm", channels, config.input_size, config.input_size, rng);
      for (int i = 0; i < kConvsPerRepetition; ++i) {
        add_conv(store, block_conv(rep, i), hc, i == 0 ? channels : hc, rng);
      }
      channels = hc;
    }
  }
  store.add("head.deconv.weight", he_uniform({hc, kNumKeypoints, 4, 4}, rng));
  store.add("head.deconv.bias", Tensor({kNumKeypoints}, 0.0));
}

Var head_forward(ParamBinding& params, const HeadConfig& config, const Var& features) {
  const Shape& shape = features.shape();
  if (shape.size() != 3 || shape[1] != config.input_size || shape[2] != config.input_size) {
    throw ShapeError("head: features must be C x " + std::to_string(config.input_size) + " x " +
                     std::to_string(config.input_size) + ", got " + to_string(shape));
  }
  Var x = features;
  switch (config.variant) {
    case HeadVariant::Baseline8Conv:
      for (int i = 0; i < kBaselineConvs; ++i) x = conv_relu(params, head_conv(i), x);
      break;
    case HeadVariant::GcmSeries:
      for (int rep = 0; rep < kRepetitions; ++rep) {
        x = gcm_forward(x, bind_gcm(params, block_prefix(rep) + ".gcm", config.heads));
        for (int i = 0; i < kConvsPerRepetition; ++i) x = conv_relu(params, block_conv(rep, i), x);
      }
      break;
    case HeadVariant::GcmParallel:
      for (int rep = 0; rep < kRepetitions; ++rep) {
        const Var global = gcm_residual(x, bind_gcm(params, block_prefix(rep) + ".gcm", config.heads));
        Var local = x;
        for (int i = 0; i < kConvsPerRepetition; ++i) local = conv_relu(params, block_conv(rep, i), local);
        x = relu(add(global, local));
      }
      break;
  }
  const Var up = conv_transpose2d(x, params("head.deconv.weight"), params("head.deconv.bias"), 2, 1);
  return bilinear_upsample(up, 2);
}

int receptive_field(std::span<const LayerSpec> layers) {
  int rf = 1;
  int jump = 1;
  for (const LayerSpec& l : layers) {
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return rf;
}

std::vector<LayerSpec> trunk_conv_layers(const HeadConfig& config) {
  if (config.variant == HeadVariant::Baseline8Conv) return std::vector<LayerSpec>(kBaselineConvs, {3, 1});
  // Each repetition: the GCM's 3x3 integration conv, then four 3x3 convs.
  return std::vector<LayerSpec>(kRepetitions * (kConvsPerRepetition + 1), {3, 1});
}

ReceptiveField receptive_field(const HeadConfig& config) {
  if (config.variant == HeadVariant::Baseline8Conv) {
    const auto layers = trunk_conv_layers(config);
    return {false, receptive_field(layers)};
  }
  return {true, config.input_size};
}

// ---------------------------------------------------------------------------
// Targets, loss, decoding

int HeatmapTargets::valid_count() const {
  return static_cast<int>(std::count(valid.begin(), valid.end(), true));
}

HeatmapTargets encode_targets(const KeypointSet& keypoints, const Box& box, int heatmap_h, int heatmap_w) {
  if (!box.valid()) throw ShapeError("encode_targets: invalid box");
  HeatmapTargets t;
  t.width = heatmap_w;
  t.height = heatmap_h;
  const double sx = heatmap_w / box.width();
  const double sy = heatmap_h / box.height();
  for (int k = 0; k < kNumKeypoints; ++k) {
    const Keypoint& kp = keypoints[static_cast<std::size_t>(k)];
    const double hx = (kp.x - box.x1) * sx;
    const double hy = (kp.y - box.y1) * sy;
    t.hx[static_cast<std::size_t>(k)] = hx;
    t.hy[static_cast<std::size_t>(k)] = hy;
    int ix = static_cast<int>(std::floor(hx));
    int iy = static_cast<int>(std::floor(hy));
    if (kp.x == box.x2) ix = heatmap_w - 1;
    if (kp.y == box.y2) iy = heatmap_h - 1;
    const bool inside = kp.x >= box.x1 && kp.x <= box.x2 && kp.y >= box.y1 && kp.y <= box.y2 && ix >= 0 &&
                        ix < heatmap_w && iy >= 0 && iy < heatmap_h;
    t.valid[static_cast<std::size_t>(k)] = kp.labeled() && inside;
    t.index[static_cast<std::size_t>(k)] = inside ? iy * heatmap_w + ix : 0;
  }
  return t;
}

namespace {

void require_logits(const Var& logits, const HeatmapTargets& targets) {
  const Shape expected{kNumKeypoints, targets.height, targets.width};
  if (logits.shape() != expected) {
    throw ShapeError("keypoint_loss: logits " + to_string(logits.shape()) + " do not match targets " +
                     to_string(expected));
  }
}

}  // namespace

LossResult keypoint_loss(const Var& logits, const HeatmapTargets& targets) {
  require_logits(logits, targets);
  const int valid = targets.valid_count();
  if (valid == 0) return {Var::make(Tensor::scalar(0.0), {logits}, [](detail::Node&) {}), 0, true};

  const std::size_t plane = static_cast<std::size_t>(targets.width) * targets.height;
  const Tensor& z = logits.value();
  Tensor probs(z.shape(), 0.0);
  double total = 0.0;
  for (int k = 0; k < kNumKeypoints; ++k) {
    if (!targets.valid[static_cast<std::size_t>(k)]) continue;
    const Eigen::Map<const Eigen::ArrayXd> row(z.ptr() + k * plane, static_cast<Eigen::Index>(plane));
    const double peak = row.maxCoeff();
    // Aligned temporary so the vectorized exp/sum do not depend on where the
    // logits happen to be allocated.
    const Eigen::ArrayXd e = (row - peak).exp();
    const double partition = e.sum();
    // peak - target is exact when the two are within a factor of two.
    total += (peak - row[targets.index[static_cast<std::size_t>(k)]]) + std::log(partition);
    Eigen::Map<Eigen::ArrayXd>(probs.ptr() + k * plane, static_cast<Eigen::Index>(plane)) = e / partition;
  }
  const double inv = 1.0 / valid;
  Var loss = Var::make(Tensor::scalar(total * inv), {logits},
                       [probs = std::move(probs), targets, plane, inv](detail::Node& self) {
                         Tensor g = probs;
                         for (int k = 0; k < kNumKeypoints; ++k) {
                           if (targets.valid[static_cast<std::size_t>(k)]) {
                             g[k * plane + static_cast<std::size_t>(targets.index[static_cast<std::size_t>(k)])] -= 1.0;
                           }
                         }
                         const double scale_by = inv * self.grad[0];
                         for (double& v : g.data()) v *= scale_by;
                         accumulate_grad(*self.inputs[0], std::move(g));
                       });
  return {loss, valid, false};
}

LossResult keypoint_loss_gaussian(const Var& logits, const HeatmapTargets& targets, double sigma) {
  require_logits(logits, targets);
  const int valid = targets.valid_count();
  if (valid == 0) return {Var::make(Tensor::scalar(0.0), {logits}, [](detail::Node&) {}), 0, true};
  const int w = targets.width;
  const int h = targets.height;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  Tensor residual(logits.shape(), 0.0);
  double total = 0.0;
  for (int k = 0; k < kNumKeypoints; ++k) {
    if (!targets.valid[static_cast<std::size_t>(k)]) continue;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = x + 0.5 - targets.hx[static_cast<std::size_t>(k)];
        const double dy = y + 0.5 - targets.hy[static_cast<std::size_t>(k)];
        const double target = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        const std::size_t i = k * plane + static_cast<std::size_t>(y) * w + x;
        residual[i] = logits.value()[i] - target;
        total += residual[i] * residual[i];
      }
    }
  }
  const double inv = 1.0 / (valid * static_cast<double>(plane));
  Var loss = Var::make(Tensor::scalar(total * inv), {logits}, [residual = std::move(residual), inv](detail::Node& self) {
    Tensor g = residual;
    for (double& v : g.data()) v *= 2.0 * inv * self.grad[0];
    accumulate_grad(*self.inputs[0], std::move(g));
  });
  return {loss, valid, false};
}

LossResult keypoint_loss(const Var& logits, const HeatmapTargets& targets, const HeadConfig& config) {
  if (config.target == TargetKind::Gaussian) return keypoint_loss_gaussian(logits, targets, config.gaussian_sigma);
  return keypoint_loss(logits, targets);
}

KeypointSet decode_heatmaps(const Tensor& logits, const Box& box) {
  if (logits.rank() != 3 || logits.dim(0) != kNumKeypoints) {
    throw ShapeError("decode_heatmaps: expected " + std::to_string(kNumKeypoints) + " x h x w logits, got " +
                     to_string(logits.shape()));
  }
  if (!box.valid()) throw ShapeError("decode_heatmaps: invalid box");
  const int h = logits.dim(1);
  const int w = logits.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  KeypointSet out;
  for (int k = 0; k < kNumKeypoints; ++k) {
    const double* row = logits.ptr() + k * plane;
    const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + plane) - row);
    double partition = 0.0;
    for (std::size_t i = 0; i < plane; ++i) partition += std::exp(row[i] - row[best]);
    const int iy = static_cast<int>(best) / w;
    const int ix = static_cast<int>(best) % w;
    Keypoint& kp = out[static_cast<std::size_t>(k)];
    kp.x = box.x1 + (ix + 0.5) * box.width() / w;
    kp.y = box.y1 + (iy + 0.5) * box.height() / h;
    kp.score = 1.0 / partition;
    kp.visibility = 2;
  }
  return out;
}

}  // namespace poseroi
