#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "poseroi/geometry.hpp"
#include "poseroi/keypoints.hpp"
#include "poseroi/tensor.hpp"

namespace poseroi {

/// One person: its box (x1y1x2y2), 17 keypoints and the area OKS normalizes by.
struct Annotation {
  int id = 0;
  Box box;
  KeypointSet keypoints{};
  double area = 0.0;

  bool operator==(const Annotation&) const = default;
};

struct ImageRecord {
  int id = 0;
  std::string file_name;
  ImageSize size;
  /// 3 x H x W in [0, 1]; empty when pixels were not loaded.
  Tensor pixels;
  std::vector<Annotation> annotations;

  bool operator==(const ImageRecord&) const = default;
};

struct Dataset {
  std::vector<ImageRecord> images;

  std::size_t annotation_count() const;
  bool operator==(const Dataset&) const = default;
};

/// Reads the COCO person-keypoints schema. Boxes become x1y1x2y2; crowd
/// annotations, non-person categories and annotations without labeled
/// keypoints are dropped. Pixels are read from `image_root / file_name`
/// (binary PPM) when `image_root` is non-empty. Schema violations raise
/// DataError naming the JSON path, e.g. "$.annotations[3].bbox".
Dataset load_coco_json(const std::filesystem::path& path, const std::filesystem::path& image_root = {});
Dataset parse_coco_json(std::string_view text, const std::filesystem::path& image_root = {});

/// COCO person-keypoints JSON for `dataset` (one "person" category, id 1).
std::string to_coco_json(const Dataset& dataset);

/// Binary PPM (P6, maxval 255). Reading yields 3 x H x W in [0, 1]; writing
/// rounds each value to the nearest k / 255.
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& pixels);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = 14695981039346656037ull);
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);

struct ScaleMix {
  double small = 0.2;
  double medium = 0.8;
  double large = 0.0;

  bool operator==(const ScaleMix&) const = default;
};

/// Synthetic stick-figure scenes on a black background.
struct SynthConfig {
  int image_count = 200;
  int image_size = 128;
  int min_persons = 1;
  int max_persons = 3;
  ScaleMix scale_mix;
  double limb_thickness = 1.5;
  /// Fraction of figures posed with wrists, elbows and ankles on the border
  /// of their tight box, with no hand or foot pixels beyond them.
  double edge_keypoint_bias = 0.0;
  double occlusion_probability = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

/// Renders the dataset image by image; each image draws from its own
/// generator seeded by (seed, index), so `threads` does not change the result.
Dataset synth_generate(const SynthConfig& config, int threads = 1);

/// True when a labeled wrist, elbow or ankle lies within `fraction` of the
/// box extent from one of its edges.
bool extremity_near_border(const Annotation& annotation, double fraction = 0.05);

/// Mirrors pixels, boxes and keypoint x and swaps left/right channels.
/// Unlabeled keypoints keep their coordinates.
ImageRecord flip_horizontal(const ImageRecord& record);
/// Flips with probability `flip_probability`.
ImageRecord augment(const ImageRecord& record, double flip_probability, Rng& rng);

/// Rescales so the shorter side is `shorter_side` unless that makes the longer
/// side exceed `max_side`, in which case the longer side is `max_side`.
/// Pixels are resampled bilinearly; annotations scale with them.
ImageRecord resize_shorter_side(const ImageRecord& record, int shorter_side, int max_side);

/// Zero-pads pixels on the right and bottom up to multiples of `multiple`.
ImageRecord pad_to_multiple(const ImageRecord& record, int multiple);

/// Dataset directory: annotations.json (COCO), images/<id>.ppm and
/// manifest.json with the FNV-1a of every file and of the whole set.
struct Manifest {
  struct Entry {
    std::string path;
    std::uint64_t bytes = 0;
    std::string fnv1a;
  };
  std::vector<Entry> files;
  /// Hash over the sorted (path, file hash) list.
  std::string hash;
  /// Free-form generator description (JSON text).
  std::string source;
};

Manifest write_dataset(const std::filesystem::path& dir, const Dataset& dataset, const std::string& source_json);
/// Loads annotations and pixels and checks every file against the manifest.
Dataset read_dataset(const std::filesystem::path& dir);
Manifest read_manifest(const std::filesystem::path& dir);

}  // namespace poseroi
