#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "poseroi/geometry.hpp"
#include "poseroi/keypoints.hpp"

namespace poseroi {

/// Per-keypoint OKS falloff constants. The default is twice the COCO
/// keypoint sigmas, the form the COCO evaluator actually divides by.
struct SigmaTable {
  std::array<double, kNumKeypoints> kappa;

  static SigmaTable coco();
  static SigmaTable constant(double value);
  void validate() const;
  bool operator==(const SigmaTable&) const = default;
};

struct GroundTruth {
  int image_id = 0;
  int id = 0;
  KeypointSet keypoints{};
  double area = 0.0;
  Box box;
};

struct Prediction {
  int image_id = 0;
  int id = 0;
  KeypointSet keypoints{};
  double score = 0.0;
  /// Used only to decide whether an unmatched prediction falls inside an
  /// area range.
  Box box;
};

/// mean_i exp(-d_i^2 / (2 * area * kappa_i^2)) over labeled gt keypoints.
double oks(const KeypointSet& pred, const KeypointSet& gt, double gt_area, const SigmaTable& sigmas);

inline constexpr int kNumThresholds = 10;
inline constexpr int kMaxDetectionsPerImage = 20;
inline constexpr double kMediumMinArea = 32.0 * 32.0;
inline constexpr double kLargeMinArea = 96.0 * 96.0;

std::array<double, kNumThresholds> oks_thresholds();

enum class ScaleBucket { Small, Medium, Large };
ScaleBucket scale_bucket(double area);

struct AreaRange {
  double lo = 0.0;  // exclusive, except the all-range
  double hi = 1e10;
  bool contains(double area) const { return area > lo && area <= hi; }
};

inline constexpr AreaRange kAllAreas{-1.0, 1e10};
inline constexpr AreaRange kMediumAreas{kMediumMinArea, kLargeMinArea};
inline constexpr AreaRange kLargeAreas{kLargeMinArea, 1e10};

/// 101-point interpolated average precision from the true/false-positive
/// flags of non-ignored predictions in ranked order. 0 when there are no
/// positives.
double interpolated_ap(const std::vector<bool>& ranked_true_positive, int positives);

struct EvalConfig {
  SigmaTable sigmas = SigmaTable::coco();
  /// Miss radius as a fraction of sqrt(gt area).
  double radius_factor = 0.2;
  double pck_factor = 0.2;

  void validate() const;
  bool operator==(const EvalConfig&) const = default;
};

struct MissRates {
  std::array<double, kNumKeypoints> per_keypoint{};
  std::array<double, 3> per_scale{};  // small, medium, large
  std::array<int, 3> scale_counts{};  // labeled keypoints per bucket
  double overall = 0.0;
};

struct EvalReport {
  std::array<double, kNumThresholds> ap_per_threshold{};
  double ap_mean = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  double pck = 0.0;
  std::array<double, kNumKeypoints> per_keypoint_miss_rate{};
  std::array<double, 3> per_scale_miss_rate{};
  int num_ground_truths = 0;
  int num_predictions = 0;

  bool operator==(const EvalReport&) const = default;
};

/// Matches each ground truth to at most one prediction of its image for the
/// keypoint-level metrics: greedy by score, highest OKS, any OKS > 0.
std::vector<int> match_for_keypoints(const std::vector<Prediction>& predictions,
                                     const std::vector<GroundTruth>& ground_truths, const SigmaTable& sigmas);

MissRates miss_rate(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& ground_truths,
                    double radius_factor, const SigmaTable& sigmas = SigmaTable::coco());

double pck(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& ground_truths, double factor,
           const SigmaTable& sigmas = SigmaTable::coco());

/// AP at each threshold for ground truths inside `range`. Per image the top
/// kMaxDetectionsPerImage predictions are visited by descending score (ties by
/// id); each takes the unmatched ground truth of highest OKS >= threshold,
/// preferring ground truths inside the range. Ground truths outside the range
/// or without labeled keypoints are ignored, as are predictions matched to
/// them and unmatched predictions whose box area lies outside the range.
std::array<double, kNumThresholds> ap_over_thresholds(const std::vector<Prediction>& predictions,
                                                      const std::vector<GroundTruth>& ground_truths,
                                                      const SigmaTable& sigmas, const AreaRange& range);

EvalReport ap_eval(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& ground_truths,
                   const EvalConfig& config = {});

/// "key: value" lines; arrays are space separated.
std::string to_text(const EvalReport& report);
void write_text(std::ostream& out, const EvalReport& report);

/// One header row and one value row.
std::string csv_header();
std::string csv_row(const EvalReport& report);

}  // namespace poseroi
