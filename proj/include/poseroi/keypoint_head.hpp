#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "poseroi/geometry.hpp"
#include "poseroi/keypoints.hpp"
#include "poseroi/params.hpp"

namespace poseroi {

enum class HeadVariant { Baseline8Conv, GcmSeries, GcmParallel };
enum class TargetKind { OneHot, Gaussian };

std::string to_string(HeadVariant variant);
HeadVariant parse_head_variant(const std::string& text);
std::string to_string(TargetKind kind);
TargetKind parse_target_kind(const std::string& text);

struct HeadConfig {
  HeadVariant variant = HeadVariant::GcmSeries;
  int head_channels = 32;
  /// Attention heads per global context block.
  int heads = 4;
  /// RoI feature extent fed to the head (square).
  int input_size = 14;
  /// Output heatmap extent (square); must be 4 * input_size.
  int heatmap_size = 56;
  TargetKind target = TargetKind::OneHot;
  /// Gaussian target spread in heatmap cells (TargetKind::Gaussian only).
  double gaussian_sigma = 1.5;

  /// Throws ConfigError when the config cannot be built on `in_channels`.
  void validate(int in_channels) const;
  bool operator==(const HeadConfig&) const = default;
};

/// Weights of one global context block bound for a forward pass: query, key
/// and value projections (C x C), height and width position encodings
/// (C x h and C x w, split across heads like the projections), and the 3x3
/// convolution that integrates the attended features back to C channels.
struct GcmBlock {
  Var query;
  Var key;
  Var value;
  Var rel_h;
  Var rel_w;
  Var conv_weight;
  Var conv_bias;
  int heads = 1;
};

void init_gcm(ParameterStore& store, const std::string& prefix, int channels, int height, int width, Rng& rng);
GcmBlock bind_gcm(ParamBinding& params, const std::string& prefix, int heads);

struct MhsaResult {
  Var output;                   // C x h x w
  std::vector<Var> attention;  // per head, (h*w) x (h*w), rows are queries
};

/// Multi-head self-attention over all h*w positions. Per head the logits
/// are q^T k + q^T (Rh + Rw) with q scaled by 1/sqrt(C/heads); values are
/// averaged under the row softmax and heads are concatenated on channels.
MhsaResult mhsa(const Var& features, const GcmBlock& block);
Var mhsa_forward(const Var& features, const GcmBlock& block);

/// relu(features + conv3x3(mhsa(features))).
Var gcm_forward(const Var& features, const GcmBlock& block);

void init_head(ParameterStore& store, const HeadConfig& config, int in_channels, Rng& rng);

/// Keypoint logits, kNumKeypoints x heatmap_size x heatmap_size.
Var head_forward(ParamBinding& params, const HeadConfig& config, const Var& features);

struct LayerSpec {
  int kernel = 3;
  int stride = 1;
};

/// rf = 1 + sum_i (k_i - 1) * prod_{j<i} s_j.
int receptive_field(std::span<const LayerSpec> layers);

struct ReceptiveField {
  bool global = false;
  /// Receptive field in input cells; the full input extent when global.
  int extent = 1;
};

/// Receptive field of the head's pre-upsampling trunk.
ReceptiveField receptive_field(const HeadConfig& config);

/// Convolution layers of the trunk in order. Attention blocks are not listed;
/// they make the field global on their own.
std::vector<LayerSpec> trunk_conv_layers(const HeadConfig& config);

struct HeatmapTargets {
  std::array<int, kNumKeypoints> index{};  // row-major cell index
  std::array<bool, kNumKeypoints> valid{};
  std::array<double, kNumKeypoints> hx{};  // continuous heatmap coordinates
  std::array<double, kNumKeypoints> hy{};
  int width = 0;
  int height = 0;

  int valid_count() const;
};

/// Maps labeled keypoints inside the box to one-hot heatmap cells under the
/// affine box -> heatmap map. Keypoints outside the box or unlabeled are
/// masked. The right and bottom box edges belong to the last cell.
HeatmapTargets encode_targets(const KeypointSet& keypoints, const Box& box, int heatmap_h, int heatmap_w);

struct LossResult {
  Var loss;
  int valid = 0;
  /// Set when no keypoint was valid and the loss is identically zero.
  bool empty_warning = false;
};

/// Mean over valid keypoints of -log softmax_spatial(logits)[target].
LossResult keypoint_loss(const Var& logits, const HeatmapTargets& targets);

/// Mean over valid keypoints of the per-cell squared error to a Gaussian
/// bump centred on the keypoint.
LossResult keypoint_loss_gaussian(const Var& logits, const HeatmapTargets& targets, double sigma);

LossResult keypoint_loss(const Var& logits, const HeatmapTargets& targets, const HeadConfig& config);

/// Argmax decoding (ties go to the smallest row-major index) mapped back to
/// image coordinates at cell centres; score is the softmax probability there.
KeypointSet decode_heatmaps(const Tensor& logits, const Box& box);

}  // namespace poseroi
