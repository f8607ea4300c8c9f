#include "poseroi/model.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

#include "poseroi/error.hpp"

namespace poseroi {

void ModelConfig::validate() const {
  backbone.validate();
  head.validate(backbone.fpn_channels);
  if (!(magnification >= 1.0 && magnification <= 4.0)) throw ConfigError("model: magnification must lie in [1, 4]");
  if (level.kind == LevelStrategy::Kind::Fixed && (level.fixed_level < 2 || level.fixed_level > 5)) {
    throw ConfigError("model: fixed level must be one of P2..P5");
  }
  if (level.kind == LevelStrategy::Kind::SizeBased && !(level.canonical > 0.0)) {
    throw ConfigError("model: canonical size must be positive");
  }
}

ParameterStore init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterStore store;
  Rng rng(seed);
  init_backbone(store, config.backbone, rng);
  init_head(store, config.head, config.backbone.fpn_channels, rng);
  return store;
}

namespace {

Tensor padded(const Tensor& image) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const int ph = (h + kInputMultiple - 1) / kInputMultiple * kInputMultiple;
  const int pw = (w + kInputMultiple - 1) / kInputMultiple * kInputMultiple;
  if (ph == h && pw == w) return image;
  Tensor out({c, ph, pw});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(ch, y, x) = image.at(ch, y, x);
    }
  }
  return out;
}

}  // namespace

ModelOutput model_forward(ParamBinding& params, const ModelConfig& config, const Tensor& image,
                          std::span<const Box> proposals) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("model: image must be 3 x H x W, got " + to_string(image.shape()));
  const Var input = Var::constant(padded(image));
  const FeaturePyramid pyramid = fpn_fuse(params, backbone_forward(params, config.backbone, input));
  ModelOutput out;
  for (const Box& box : proposals) {
    const Var features =
        extract_person_features(pyramid, box, config.level, config.magnification, config.head.input_size);
    out.logits.push_back(head_forward(params, config.head, features));
    out.rois.push_back(enlarge_box(box, config.magnification));
  }
  return out;
}

std::vector<Box> simulate_proposals(const ImageRecord& record, const ProposalNoise& noise) {
  std::seed_seq seq{static_cast<std::uint32_t>(noise.seed), static_cast<std::uint32_t>(noise.seed >> 32),
                    static_cast<std::uint32_t>(record.id), 0x9e37u};
  Rng rng(seq);
  std::vector<Box> out;
  for (const Annotation& a : record.annotations) out.push_back(jitter_box(a.box, noise.scale, noise.shift, rng));
  return out;
}

std::vector<Prediction> predict(const ParameterStore& weights, const ModelConfig& config, const Dataset& dataset,
                                const ProposalNoise& noise, int threads) {
  config.validate();
  const std::size_t n = dataset.images.size();
  std::vector<std::vector<Prediction>> per_image(n);
  const auto run = [&](std::size_t i) {
    const ImageRecord& r = dataset.images[i];
    if (r.pixels.empty()) throw DataError("predict: image " + std::to_string(r.id) + " has no pixels");
    const std::vector<Box> proposals = simulate_proposals(r, noise);
    ParamBinding params(weights, [](const std::string&) { return false; });
    const ModelOutput out = model_forward(params, config, r.pixels, proposals);
    for (std::size_t p = 0; p < proposals.size(); ++p) {
      Prediction pred;
      pred.image_id = r.id;
      pred.id = r.annotations[p].id;
      pred.keypoints = decode_heatmaps(out.logits[p].value(), out.rois[p]);
      double score = 0.0;
      for (const Keypoint& k : pred.keypoints) score += k.score;
      pred.score = score / kNumKeypoints;
      pred.box = proposals[p];
      per_image[i].push_back(pred);
    }
  };
  const int workers = static_cast<int>(std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(n, 1)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    {
      std::vector<std::jthread> pool;
      for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
          try {
            for (std::size_t i = static_cast<std::size_t>(t); i < n; i += static_cast<std::size_t>(workers)) run(i);
          } catch (...) {
            errors[static_cast<std::size_t>(t)] = std::current_exception();
          }
        });
      }
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<Prediction> out;
  for (auto& v : per_image) out.insert(out.end(), v.begin(), v.end());
  return out;
}

std::vector<GroundTruth> ground_truths(const Dataset& dataset) {
  std::vector<GroundTruth> out;
  for (const ImageRecord& r : dataset.images) {
    for (const Annotation& a : r.annotations) out.push_back({r.id, a.id, a.keypoints, a.area, a.box});
  }
  return out;
}

}  // namespace poseroi
