#pragma once

#include <array>
#include <string_view>

namespace poseroi {

inline constexpr int kNumKeypoints = 17;

/// One COCO keypoint. visibility: 0 unlabeled, 1 labeled but occluded,
/// 2 labeled and visible. Predictions use 2 and carry a score in [0, 1].
struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
  int visibility = 0;

  bool labeled() const { return visibility > 0; }
  bool operator==(const Keypoint&) const = default;
};

/// Keypoints in canonical COCO order.
using KeypointSet = std::array<Keypoint, kNumKeypoints>;

inline constexpr std::array<std::string_view, kNumKeypoints> kKeypointNames = {
    "nose",           "left_eye",       "right_eye",  "left_ear",    "right_ear",  "left_shoulder",
    "right_shoulder", "left_elbow",     "right_elbow", "left_wrist", "right_wrist", "left_hip",
    "right_hip",      "left_knee",      "right_knee", "left_ankle",  "right_ankle"};

/// Channel each keypoint moves to under a horizontal flip (left/right swap).
inline constexpr std::array<int, kNumKeypoints> kFlipIndex = {0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15};

inline int labeled_count(const KeypointSet& kps) {
  int n = 0;
  for (const Keypoint& k : kps) n += k.labeled() ? 1 : 0;
  return n;
}

}  // namespace poseroi
