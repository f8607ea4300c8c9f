#include "poseroi/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "poseroi/error.hpp"

namespace poseroi {

namespace {

using nlohmann::json;

// A JSON object being read: typed optional fields, with every key that was
// not asked for reported on finish().
class Section {
 public:
  Section(const json& value, std::string path) : value_(value), path_(std::move(path)) {
    if (!value_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  Section child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = value_.find(key);
    return {it == value_.end() ? empty : *it, path_ + "." + key};
  }

  void read(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<int>();
    }
  }
  void read(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::filesystem::path& out) {
    std::string s = out.string();
    read(key, s);
    out = s;
  }
  template <typename T, std::size_t N>
  void read(const char* key, std::array<T, N>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->size() != N) fail(key, "an array of " + std::to_string(N) + " numbers");
      for (std::size_t i = 0; i < N; ++i) {
        const json& e = (*v)[i];
        if (!e.is_number() || (std::is_integral_v<T> && !e.is_number_integer())) {
          fail(key, "an array of " + std::to_string(N) + (std::is_integral_v<T> ? " integers" : " numbers"));
        }
        out[i] = e.get<T>();
      }
    }
  }
  template <typename F>
  void read_as(const char* key, F&& convert) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      try {
        convert(v->get<std::string>());
      } catch (const Error& e) {
        throw ConfigError(path_ + "." + key + ": " + e.what());
      }
    }
  }

  /// Marks `key` as known and hands back its raw value, if present.
  const json* raw(const char* key) { return find(key); }

  void finish() const {
    for (const auto& [key, value] : value_.items()) {
      if (!seen_.contains(key)) throw ConfigError(path_ + "." + key + ": unknown key");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = value_.find(key);
    return it == value_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const std::string& expected) const {
    throw ConfigError(path_ + "." + key + ": expected " + expected);
  }

  const json& value_;
  std::string path_;
  std::set<std::string, std::less<>> seen_;
};

void read_synth(Section s, SynthConfig& c) {
  s.read("image_count", c.image_count);
  s.read("image_size", c.image_size);
  s.read("min_persons", c.min_persons);
  s.read("max_persons", c.max_persons);
  Section mix = s.child("scale_mix");
  mix.read("small", c.scale_mix.small);
  mix.read("medium", c.scale_mix.medium);
  mix.read("large", c.scale_mix.large);
  mix.finish();
  s.read("limb_thickness", c.limb_thickness);
  s.read("edge_keypoint_bias", c.edge_keypoint_bias);
  s.read("occlusion_probability", c.occlusion_probability);
  s.read("seed", c.seed);
  s.finish();
}

void read_model(Section s, ModelConfig& c) {
  Section b = s.child("backbone");
  b.read("stem_channels", c.backbone.stem_channels);
  b.read("stage_channels", c.backbone.stage_channels);
  b.read("convs_per_stage", c.backbone.convs_per_stage);
  b.read("fpn_channels", c.backbone.fpn_channels);
  b.finish();
  Section h = s.child("head");
  h.read_as("variant", [&](const std::string& v) { c.head.variant = parse_head_variant(v); });
  h.read("head_channels", c.head.head_channels);
  h.read("heads", c.head.heads);
  h.read("input_size", c.head.input_size);
  h.read("heatmap_size", c.head.heatmap_size);
  h.read_as("target", [&](const std::string& v) { c.head.target = parse_target_kind(v); });
  h.read("gaussian_sigma", c.head.gaussian_sigma);
  h.finish();
  s.read_as("level", [&](const std::string& v) { c.level = parse_level(v); });
  s.read("magnification", c.magnification);
  s.finish();
}

void read_train(Section s, RunConfig& r) {
  TrainConfig& c = r.train;
  s.read("base_lr", c.base_lr);
  s.read("momentum", c.momentum);
  s.read("weight_decay", c.weight_decay);
  s.read("total_iterations", c.total_iterations);
  s.read("milestones", c.milestones);
  s.read("decay_factor", c.decay_factor);
  s.read("batch_size", c.batch_size);
  s.read("jitter_scale", c.jitter_scale);
  s.read("jitter_shift", c.jitter_shift);
  s.read("flip_probability", c.flip_probability);
  s.read("freeze_backbone", c.freeze_backbone);
  s.read("seed", c.seed);
  s.read("threads", c.threads);
  s.read("eval_every_epochs", c.eval_every_epochs);
  s.read("eval_images", c.eval_images);
  s.read("checkpoint_every", r.checkpoint_every);
  s.finish();
}

void read_eval(Section s, EvalSection& c) {
  if (const json* sigmas = s.raw("sigmas")) {
    const auto numeric = [](const json& v) { return v.is_number(); };
    if (sigmas->is_number()) {
      c.metrics.sigmas = SigmaTable::constant(sigmas->get<double>());
    } else if (sigmas->is_array() && sigmas->size() == kNumKeypoints && std::all_of(sigmas->begin(), sigmas->end(), numeric)) {
      for (int k = 0; k < kNumKeypoints; ++k) c.metrics.sigmas.kappa[k] = (*sigmas)[k].get<double>();
    } else {
      throw ConfigError("$.eval.sigmas: expected a number or an array of 17 numbers");
    }
  }
  s.read("radius_factor", c.metrics.radius_factor);
  s.read("pck_factor", c.metrics.pck_factor);
  s.read("proposal_scale", c.proposals.scale);
  s.read("proposal_shift", c.proposals.shift);
  s.read("proposal_seed", c.proposals.seed);
  s.read("images", c.images);
  s.finish();
}

json synth_json(const SynthConfig& c) {
  return {{"image_count", c.image_count},
          {"image_size", c.image_size},
          {"min_persons", c.min_persons},
          {"max_persons", c.max_persons},
          {"scale_mix", {{"small", c.scale_mix.small}, {"medium", c.scale_mix.medium}, {"large", c.scale_mix.large}}},
          {"limb_thickness", c.limb_thickness},
          {"edge_keypoint_bias", c.edge_keypoint_bias},
          {"occlusion_probability", c.occlusion_probability},
          {"seed", c.seed}};
}

}  // namespace

LevelStrategy parse_level(const std::string& text) {
  if (text == "size_based") return LevelStrategy::size_based();
  if (text.size() == 2 && (text[0] == 'P' || text[0] == 'p') && text[1] >= '2' && text[1] <= '5') {
    return LevelStrategy::fixed(text[1] - '0');
  }
  throw ConfigError("unknown level strategy '" + text + "' (expected size_based or P2..P5)");
}

void RunConfig::validate() const {
  if (data.source != "synth" && data.source != "coco") {
    throw ConfigError("data.source must be synth or coco, not '" + data.source + "'");
  }
  if (data.source == "coco" && data.path.empty()) throw ConfigError("data.path is required for coco data");
  data.synth.validate();
  model.validate();
  train.validate();
  eval.metrics.validate();
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be non-negative");
  if (eval.images < 0) throw ConfigError("eval.images must be non-negative");
  if (!(eval.proposals.scale >= 0.0 && eval.proposals.shift >= 0.0)) {
    throw ConfigError("eval proposal jitter must be non-negative");
  }
}

RunConfig parse_run_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section top(root, "$");
  Section data = top.child("data");
  data.read("source", c.data.source);
  data.read("path", c.data.path);
  data.read("image_root", c.data.image_root);
  read_synth(data.child("synth"), c.data.synth);
  data.finish();
  read_model(top.child("model"), c.model);
  read_train(top.child("train"), c);

  read_eval(top.child("eval"), c.eval);
  top.read("output", c.output);
  top.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_run_config(buffer.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const json out = {
      {"data",
       {{"source", c.data.source},
        {"path", c.data.path.string()},
        {"image_root", c.data.image_root.string()},
        {"synth", synth_json(c.data.synth)}}},
      {"model",
       {{"backbone",
         {{"stem_channels", c.model.backbone.stem_channels},
          {"stage_channels", c.model.backbone.stage_channels},
          {"convs_per_stage", c.model.backbone.convs_per_stage},
          {"fpn_channels", c.model.backbone.fpn_channels}}},
        {"head",
         {{"variant", to_string(c.model.head.variant)},
          {"head_channels", c.model.head.head_channels},
          {"heads", c.model.head.heads},
          {"input_size", c.model.head.input_size},
          {"heatmap_size", c.model.head.heatmap_size},
          {"target", to_string(c.model.head.target)},
          {"gaussian_sigma", c.model.head.gaussian_sigma}}},
        {"level", c.model.level.name()},
        {"magnification", c.model.magnification}}},
      {"train",
       {{"base_lr", t.base_lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"total_iterations", t.total_iterations},
        {"milestones", t.milestones},
        {"decay_factor", t.decay_factor},
        {"batch_size", t.batch_size},
        {"jitter_scale", t.jitter_scale},
        {"jitter_shift", t.jitter_shift},
        {"flip_probability", t.flip_probability},
        {"freeze_backbone", t.freeze_backbone},
        {"seed", t.seed},
        {"threads", t.threads},
        {"eval_every_epochs", t.eval_every_epochs},
        {"eval_images", t.eval_images},
        {"checkpoint_every", c.checkpoint_every}}},
      {"eval",
       {{"sigmas", c.eval.metrics.sigmas.kappa},
        {"radius_factor", c.eval.metrics.radius_factor},
        {"pck_factor", c.eval.metrics.pck_factor},
        {"proposal_scale", c.eval.proposals.scale},
        {"proposal_shift", c.eval.proposals.shift},
        {"proposal_seed", c.eval.proposals.seed},
        {"images", c.eval.images}}},
      {"output", c.output.string()}};
  return out.dump(2) + "\n";
}

}  // namespace poseroi
