#include "poseroi/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "poseroi/error.hpp"

namespace poseroi {

SigmaTable SigmaTable::coco() {
  constexpr std::array<double, kNumKeypoints> sigma = {.26, .25, .25, .35, .35, .79, .79, .72, .72,
                                                       .62, .62, 1.07, 1.07, .87, .87, .89, .89};
  SigmaTable t;
  for (int i = 0; i < kNumKeypoints; ++i) t.kappa[static_cast<std::size_t>(i)] = 2.0 * sigma[static_cast<std::size_t>(i)] / 10.0;
  return t;
}

SigmaTable SigmaTable::constant(double value) {
  SigmaTable t;
  t.kappa.fill(value);
  return t;
}

void SigmaTable::validate() const {
  for (double k : kappa) {
    if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("sigmas: every falloff constant must be positive");
  }
}

double oks(const KeypointSet& pred, const KeypointSet& gt, double gt_area, const SigmaTable& sigmas) {
  if (!(gt_area > 0.0)) throw DataError("oks: ground-truth area must be positive");
  double total = 0.0;
  int labeled = 0;
  for (int i = 0; i < kNumKeypoints; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (!gt[k].labeled()) continue;
    const double dx = pred[k].x - gt[k].x;
    const double dy = pred[k].y - gt[k].y;
    const double kappa = sigmas.kappa[k];
    total += std::exp(-(dx * dx + dy * dy) / (2.0 * gt_area * kappa * kappa));
    ++labeled;
  }
  if (labeled == 0) throw DataError("oks: ground truth has no labeled keypoints");
  return total / labeled;
}

std::array<double, kNumThresholds> oks_thresholds() {
  // Same values as numpy.linspace(0.5, 0.95, 10), bit for bit.
  std::array<double, kNumThresholds> t{};
  const double step = (0.95 - 0.5) / (kNumThresholds - 1);
  for (int i = 0; i < kNumThresholds; ++i) t[static_cast<std::size_t>(i)] = i * step + 0.5;
  t.back() = 0.95;
  return t;
}

ScaleBucket scale_bucket(double area) {
  if (area <= kMediumMinArea) return ScaleBucket::Small;
  if (area <= kLargeMinArea) return ScaleBucket::Medium;
  return ScaleBucket::Large;
}

double interpolated_ap(const std::vector<bool>& ranked_true_positive, int positives) {
  if (positives <= 0) return 0.0;
  const std::size_t n = ranked_true_positive.size();
  std::vector<double> precision(n), recall(n);
  double tp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked_true_positive[i]) tp += 1.0;
    precision[i] = tp / static_cast<double>(i + 1);
    recall[i] = tp / positives;
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r * 0.01;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

namespace {

struct ImageGroup {
  std::vector<const Prediction*> preds;  // top detections, visiting order
  std::vector<const GroundTruth*> gts;
  std::vector<std::vector<double>> overlaps;  // preds x gts
};

bool by_score(const Prediction* a, const Prediction* b) {
  if (a->score != b->score) return a->score > b->score;
  return a->id < b->id;
}

bool has_labels(const GroundTruth& g) { return labeled_count(g.keypoints) > 0; }

std::map<int, ImageGroup> group_by_image(const std::vector<Prediction>& predictions,
                                         const std::vector<GroundTruth>& ground_truths, const SigmaTable& sigmas,
                                         int max_per_image) {
  std::map<int, ImageGroup> images;
  for (const GroundTruth& g : ground_truths) {
    if (!(g.area > 0.0)) throw DataError("eval: ground truth " + std::to_string(g.id) + " has non-positive area");
    images[g.image_id].gts.push_back(&g);
  }
  for (const Prediction& p : predictions) {
    if (!std::isfinite(p.score)) throw DataError("eval: prediction " + std::to_string(p.id) + " has a non-finite score");
    images[p.image_id].preds.push_back(&p);
  }
  for (auto& [id, img] : images) {
    std::sort(img.preds.begin(), img.preds.end(), by_score);
    if (max_per_image > 0 && static_cast<int>(img.preds.size()) > max_per_image) img.preds.resize(static_cast<std::size_t>(max_per_image));
    std::sort(img.gts.begin(), img.gts.end(), [](const GroundTruth* a, const GroundTruth* b) { return a->id < b->id; });
    img.overlaps.assign(img.preds.size(), std::vector<double>(img.gts.size(), 0.0));
    for (std::size_t d = 0; d < img.preds.size(); ++d) {
      for (std::size_t g = 0; g < img.gts.size(); ++g) {
        if (has_labels(*img.gts[g])) {
          img.overlaps[d][g] = oks(img.preds[d]->keypoints, img.gts[g]->keypoints, img.gts[g]->area, sigmas);
        }
      }
    }
  }
  return images;
}

struct RankedDetection {
  double score;
  int image_id;
  std::size_t rank;  // position within the image's visiting order
  bool true_positive;
};

}  // namespace

std::array<double, kNumThresholds> ap_over_thresholds(const std::vector<Prediction>& predictions,
                                                      const std::vector<GroundTruth>& ground_truths,
                                                      const SigmaTable& sigmas, const AreaRange& range) {
  const auto images = group_by_image(predictions, ground_truths, sigmas, kMaxDetectionsPerImage);
  const auto thresholds = oks_thresholds();
  std::array<double, kNumThresholds> ap{};

  for (int t = 0; t < kNumThresholds; ++t) {
    const double threshold = std::min(thresholds[static_cast<std::size_t>(t)], 1.0 - 1e-10);
    std::vector<RankedDetection> ranked;
    int positives = 0;
    for (const auto& [image_id, img] : images) {
      // Ground truths in range come first so a match prefers them.
      std::vector<std::size_t> order(img.gts.size());
      std::iota(order.begin(), order.end(), 0);
      std::vector<bool> ignored(img.gts.size());
      for (std::size_t g = 0; g < img.gts.size(); ++g) {
        ignored[g] = !range.contains(img.gts[g]->area) || !has_labels(*img.gts[g]);
        if (!ignored[g]) ++positives;
      }
      std::stable_partition(order.begin(), order.end(), [&](std::size_t g) { return !ignored[g]; });

      std::vector<bool> taken(img.gts.size(), false);
      for (std::size_t d = 0; d < img.preds.size(); ++d) {
        double best = threshold;
        int match = -1;
        for (std::size_t g : order) {
          if (taken[g]) continue;
          if (match >= 0 && !ignored[static_cast<std::size_t>(match)] && ignored[g]) break;
          if (img.overlaps[d][g] < best) continue;
          best = img.overlaps[d][g];
          match = static_cast<int>(g);
        }
        bool skip = false;
        if (match >= 0) {
          taken[static_cast<std::size_t>(match)] = true;
          skip = ignored[static_cast<std::size_t>(match)];
        } else {
          skip = !range.contains(img.preds[d]->box.area());
        }
        if (!skip) ranked.push_back({img.preds[d]->score, image_id, d, match >= 0});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDetection& a, const RankedDetection& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image_id != b.image_id) return a.image_id < b.image_id;
      return a.rank < b.rank;
    });
    std::vector<bool> tp(ranked.size());
    for (std::size_t i = 0; i < ranked.size(); ++i) tp[i] = ranked[i].true_positive;
    ap[static_cast<std::size_t>(t)] = interpolated_ap(tp, positives);
  }
  return ap;
}

std::vector<int> match_for_keypoints(const std::vector<Prediction>& predictions,
                                     const std::vector<GroundTruth>& ground_truths, const SigmaTable& sigmas) {
  const auto images = group_by_image(predictions, ground_truths, sigmas, 0);
  std::vector<int> result(ground_truths.size(), -1);
  for (const auto& [image_id, img] : images) {
    std::vector<bool> taken(img.gts.size(), false);
    for (std::size_t d = 0; d < img.preds.size(); ++d) {
      double best = 0.0;
      int match = -1;
      for (std::size_t g = 0; g < img.gts.size(); ++g) {
        if (taken[g] || !(img.overlaps[d][g] > best)) continue;
        best = img.overlaps[d][g];
        match = static_cast<int>(g);
      }
      if (match < 0) continue;
      taken[static_cast<std::size_t>(match)] = true;
      const auto gt_index = static_cast<std::size_t>(img.gts[static_cast<std::size_t>(match)] - ground_truths.data());
      result[gt_index] = static_cast<int>(img.preds[d] - predictions.data());
    }
  }
  return result;
}

namespace {

void require_positive_factor(double factor, const char* what) {
  if (!(factor > 0.0) || !std::isfinite(factor)) throw ConfigError(std::string(what) + " must be positive");
}

// Counts labeled keypoints that the matched prediction places within
// factor * sqrt(area), keyed by keypoint type and scale bucket.
struct HitCounts {
  std::array<int, kNumKeypoints> labeled{}, hit{};
  std::array<int, 3> scale_labeled{}, scale_hit{};
};

HitCounts count_hits(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& ground_truths,
                     double factor, const SigmaTable& sigmas) {
  const std::vector<int> match = match_for_keypoints(predictions, ground_truths, sigmas);
  HitCounts c;
  for (std::size_t g = 0; g < ground_truths.size(); ++g) {
    const GroundTruth& gt = ground_truths[g];
    const double radius = factor * std::sqrt(gt.area);
    const auto bucket = static_cast<std::size_t>(scale_bucket(gt.area));
    for (std::size_t k = 0; k < static_cast<std::size_t>(kNumKeypoints); ++k) {
      if (!gt.keypoints[k].labeled()) continue;
      ++c.labeled[k];
      ++c.scale_labeled[bucket];
      if (match[g] < 0) continue;
      const Keypoint& p = predictions[static_cast<std::size_t>(match[g])].keypoints[k];
      if (std::hypot(p.x - gt.keypoints[k].x, p.y - gt.keypoints[k].y) <= radius) {
        ++c.hit[k];
        ++c.scale_hit[bucket];
      }
    }
  }
  return c;
}

double miss_fraction(int hit, int labeled) { return labeled == 0 ? 0.0 : 1.0 - static_cast<double>(hit) / labeled; }

}  // namespace

MissRates miss_rate(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& ground_truths,
                    double radius_factor, const SigmaTable& sigmas) {
  require_positive_factor(radius_factor, "radius_factor");
  const HitCounts c = count_hits(predictions, ground_truths, radius_factor, sigmas);
  MissRates m;
  int hit = 0, labeled = 0;
  for (std::size_t k = 0; k < static_cast<std::size_t>(kNumKeypoints); ++k) {
    m.per_keypoint[k] = miss_fraction(c.hit[k], c.labeled[k]);
    hit += c.hit[k];
    labeled += c.labeled[k];
  }
  for (std::size_t b = 0; b < 3; ++b) {
    m.per_scale[b] = miss_fraction(c.scale_hit[b], c.scale_labeled[b]);
    m.scale_counts[b] = c.scale_labeled[b];
  }
  m.overall = miss_fraction(hit, labeled);
  return m;
}

double pck(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& ground_truths, double factor,
           const SigmaTable& sigmas) {
  require_positive_factor(factor, "pck factor");
  const HitCounts c = count_hits(predictions, ground_truths, factor, sigmas);
  const int hit = std::accumulate(c.hit.begin(), c.hit.end(), 0);
  const int labeled = std::accumulate(c.labeled.begin(), c.labeled.end(), 0);
  return labeled == 0 ? 0.0 : static_cast<double>(hit) / labeled;
}

void EvalConfig::validate() const {
  sigmas.validate();
  require_positive_factor(radius_factor, "radius_factor");
  require_positive_factor(pck_factor, "pck_factor");
}

namespace {

double mean(const std::array<double, kNumThresholds>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / kNumThresholds;
}

}  // namespace

EvalReport ap_eval(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& ground_truths,
                   const EvalConfig& config) {
  config.validate();
  EvalReport r;
  r.ap_per_threshold = ap_over_thresholds(predictions, ground_truths, config.sigmas, kAllAreas);
  r.ap_mean = mean(r.ap_per_threshold);
  r.ap_medium = mean(ap_over_thresholds(predictions, ground_truths, config.sigmas, kMediumAreas));
  r.ap_large = mean(ap_over_thresholds(predictions, ground_truths, config.sigmas, kLargeAreas));
  r.pck = pck(predictions, ground_truths, config.pck_factor, config.sigmas);
  const MissRates m = miss_rate(predictions, ground_truths, config.radius_factor, config.sigmas);
  r.per_keypoint_miss_rate = m.per_keypoint;
  r.per_scale_miss_rate = m.per_scale;
  r.num_ground_truths = static_cast<int>(ground_truths.size());
  r.num_predictions = static_cast<int>(predictions.size());
  return r;
}

namespace {

template <std::size_t N>
std::string join(const std::array<double, N>& values, char sep) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < N; ++i) out << (i ? std::string(1, sep) : "") << values[i];
  return out.str();
}

}  // namespace

std::string to_text(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "ap_mean: " << r.ap_mean << '\n'
      << "ap_per_threshold: " << join(r.ap_per_threshold, ' ') << '\n'
      << "ap_medium: " << r.ap_medium << '\n'
      << "ap_large: " << r.ap_large << '\n'
      << "pck: " << r.pck << '\n'
      << "per_keypoint_miss_rate: " << join(r.per_keypoint_miss_rate, ' ') << '\n'
      << "per_scale_miss_rate: " << join(r.per_scale_miss_rate, ' ') << '\n'
      << "num_ground_truths: " << r.num_ground_truths << '\n'
      << "num_predictions: " << r.num_predictions << '\n';
  return out.str();
}

void write_text(std::ostream& out, const EvalReport& report) { out << to_text(report); }

std::string csv_header() {
  std::string h = "ap_mean";
  for (double t : oks_thresholds()) {
    h += ",ap" + std::to_string(static_cast<int>(std::lround(t * 100)));
  }
  h += ",ap_medium,ap_large,pck";
  for (std::string_view name : kKeypointNames) h += ",miss_" + std::string(name);
  h += ",miss_small,miss_medium,miss_large";
  return h;
}

std::string csv_row(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << r.ap_mean << ',' << join(r.ap_per_threshold, ',') << ',' << r.ap_medium << ',' << r.ap_large << ','
      << r.pck << ',' << join(r.per_keypoint_miss_rate, ',') << ',' << join(r.per_scale_miss_rate, ',');
  return out.str();
}

}  // namespace poseroi
