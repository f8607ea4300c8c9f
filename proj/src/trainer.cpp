#include "poseroi/trainer.hpp"

#include <chrono>
#include <cmath>
#include <thread>

#include <json.hpp>

#include "poseroi/error.hpp"
#include "poseroi/ops.hpp"

namespace poseroi {

namespace {

bool is_backbone(const std::string& name) { return name.starts_with("backbone.") || name.starts_with("fpn."); }

Rng stream(std::uint64_t seed, int iteration, int slot, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(slot), purpose};
  return Rng(seq);
}

bool all_finite(const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    if (!poseroi::all_finite(g)) return false;
  }
  return true;
}

}  // namespace

void TrainConfig::validate() const {
  // Zero is allowed: a null update is how frozen-weight runs are expressed.
  if (!(base_lr >= 0.0)) throw ConfigError("train: base_lr must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  if (total_iterations < 1) throw ConfigError("train: total_iterations must be positive");
  if (!(milestones[0] > 0.0 && milestones[0] < milestones[1] && milestones[1] < 1.0)) {
    throw ConfigError("train: milestones must be strictly increasing inside (0, 1)");
  }
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("train: decay_factor must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
  if (!(jitter_scale >= 0.0 && jitter_scale <= 0.5 && jitter_shift >= 0.0 && jitter_shift <= 0.5)) {
    throw ConfigError("train: jitter magnitudes must lie in [0, 0.5]");
  }
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
    throw ConfigError("train: flip_probability must lie in [0, 1]");
  }
  if (threads < 1) throw ConfigError("train: threads must be positive");
  if (eval_every_epochs < 0 || eval_images < 1) throw ConfigError("train: bad eval snapshot settings");
}

std::array<int, 2> milestone_iterations(const TrainConfig& config) {
  return {static_cast<int>(std::llround(config.milestones[0] * config.total_iterations)),
          static_cast<int>(std::llround(config.milestones[1] * config.total_iterations))};
}

double lr_at(int iteration, const TrainConfig& config) {
  if (iteration < 0 || iteration >= config.total_iterations) {
    throw ConfigError("lr_at: iteration " + std::to_string(iteration) + " outside [0, " +
                      std::to_string(config.total_iterations) + ")");
  }
  double lr = config.base_lr;
  for (int m : milestone_iterations(config)) {
    if (iteration >= m) lr *= config.decay_factor;
  }
  return lr;
}

LossTrend loss_trend(const TrainLog& log, int window) {
  const int n = static_cast<int>(log.iterations.size());
  if (window < 1 || n < window) {
    throw ConfigError("loss_trend: need at least " + std::to_string(window) + " iterations, have " + std::to_string(n));
  }
  const auto mean = [&](int from) {
    double sum = 0.0;
    for (int i = from; i < from + window; ++i) sum += log.iterations[static_cast<std::size_t>(i)].loss;
    return sum / window;
  };
  return {mean(0), mean(n - window)};
}

std::string to_json_line(const IterationRecord& r) {
  return nlohmann::json{{"iteration", r.iteration}, {"lr", r.lr}, {"loss", r.loss}, {"persons", r.persons}}.dump();
}

std::string to_json_line(const EvalSnapshot& s) {
  return nlohmann::json{{"iteration", s.iteration}, {"pck", s.pck}}.dump();
}

Checkpoint initial_checkpoint(const ModelConfig& model, const TrainConfig& config) {
  Checkpoint c;
  c.weights = init_model(model, config.seed);
  for (const std::string& name : c.weights.names()) {
    if (config.freeze_backbone && is_backbone(name)) continue;
    c.velocity[name] = Tensor(c.weights.at(name).shape());
  }
  return c;
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, const TrainConfig& config, int iteration) {
  Rng rng = stream(config.seed, iteration, -1, 0xba7c4u);
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> out(static_cast<std::size_t>(config.batch_size));
  for (std::size_t& i : out) i = pick(rng);
  return out;
}

SampleGradient sample_gradient(const ParameterStore& weights, const ModelConfig& model, const TrainConfig& config,
                               const ImageRecord& image, int iteration, int slot) {
  Rng rng = stream(config.seed, iteration, slot, 0x5a3b1u);
  const ImageRecord record = augment(image, config.flip_probability, rng);
  std::vector<Box> proposals;
  for (const Annotation& a : record.annotations) {
    proposals.push_back(jitter_box(a.box, config.jitter_scale, config.jitter_shift, rng));
  }

  ParamBinding params(weights, [&](const std::string& name) { return !(config.freeze_backbone && is_backbone(name)); });
  const ModelOutput out = model_forward(params, model, record.pixels, proposals);

  std::vector<Var> losses;
  for (std::size_t p = 0; p < proposals.size(); ++p) {
    const HeatmapTargets targets =
        encode_targets(record.annotations[p].keypoints, out.rois[p], model.head.heatmap_size, model.head.heatmap_size);
    if (targets.valid_count() == 0) continue;
    losses.push_back(keypoint_loss(out.logits[p], targets, model.head).loss);
  }

  SampleGradient result;
  result.persons = static_cast<int>(losses.size());
  if (!losses.empty()) {
    Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    const Var mean = scale(total, 1.0 / static_cast<double>(losses.size()));
    result.loss = mean.value()[0];
    backward(mean);
  }
  result.gradients = params.gradients();
  return result;
}

void sgd_step(ParameterStore& weights, std::map<std::string, Tensor>& velocity,
              const std::map<std::string, Tensor>& gradients, double lr, const TrainConfig& config) {
  for (const auto& [name, g] : gradients) {
    Tensor& w = weights.at(name);
    auto [it, fresh] = velocity.try_emplace(name, Tensor(w.shape()));
    Tensor& v = it->second;
    require_same_shape(v.shape(), w.shape(), "velocity of " + name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = config.momentum * v[i] + (g[i] + config.weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
  }
}

double quick_pck(const ParameterStore& weights, const ModelConfig& model, const Dataset& dataset, int count,
                 double factor, std::uint64_t seed, int threads) {
  Dataset subset;
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(count), dataset.images.size());
  subset.images.assign(dataset.images.begin(), dataset.images.begin() + static_cast<std::ptrdiff_t>(n));
  const auto preds = predict(weights, model, subset, {0.1, 0.05, seed}, threads);
  return pck(preds, ground_truths(subset), factor);
}

TrainState train(const Dataset& dataset, const ModelConfig& model, const TrainConfig& config, Checkpoint start,
                 const TrainHooks& hooks) {
  config.validate();
  model.validate();
  if (dataset.images.empty()) throw DataError("train: dataset is empty");
  for (const ImageRecord& r : dataset.images) {
    if (r.pixels.empty()) throw DataError("train: image " + std::to_string(r.id) + " has no pixels");
  }
  if (start.iteration < 0 || start.iteration > config.total_iterations) {
    throw ConfigError("train: checkpoint iteration " + std::to_string(start.iteration) + " outside the schedule");
  }
  for (const std::string& name : start.weights.names()) {
    if (!(config.freeze_backbone && is_backbone(name))) start.velocity.try_emplace(name, Tensor(start.weights.at(name).shape()));
  }

  TrainState state{std::move(start), {}};
  Checkpoint& ck = state.checkpoint;
  const int batch = config.batch_size;
  const int epoch = static_cast<int>((dataset.images.size() + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));

  for (int it = static_cast<int>(ck.iteration); it < config.total_iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> picks = batch_indices(dataset.images.size(), config, it);
    std::vector<SampleGradient> samples(picks.size());
    const auto run = [&](std::size_t s) {
      samples[s] = sample_gradient(ck.weights, model, config, dataset.images[picks[s]], it, static_cast<int>(s));
    };
    const int workers = std::min(config.threads, batch);
    if (workers == 1) {
      for (std::size_t s = 0; s < picks.size(); ++s) run(s);
    } else {
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
      {
        std::vector<std::jthread> pool;
        for (int t = 0; t < workers; ++t) {
          pool.emplace_back([&, t] {
            try {
              for (std::size_t s = static_cast<std::size_t>(t); s < picks.size(); s += static_cast<std::size_t>(workers)) run(s);
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

    // Fixed reduction order: slot 0, 1, ...
    std::map<std::string, Tensor> mean;
    double loss = 0.0;
    int persons = 0;
    for (const SampleGradient& s : samples) {
      loss += s.loss;
      persons += s.persons;
      for (const auto& [name, g] : s.gradients) {
        auto [pos, fresh] = mean.try_emplace(name, g);
        if (!fresh) pos->second.accumulate(g);
      }
    }
    const double inv = 1.0 / batch;
    loss *= inv;
    for (auto& [name, g] : mean) {
      for (double& v : g.data()) v *= inv;
    }

    if (!std::isfinite(loss) || !all_finite(mean)) {
      std::string where;
      if (!hooks.failure_snapshot.empty()) {
        save_checkpoint(ck, hooks.failure_snapshot);
        where = "; state before the update saved to " + hooks.failure_snapshot.string();
      }
      throw NumericError("train: non-finite " + std::string(std::isfinite(loss) ? "gradient" : "loss") +
                         " at iteration " + std::to_string(it) + where);
    }

    const double lr = lr_at(it, config);
    sgd_step(ck.weights, ck.velocity, mean, lr, config);
    ck.iteration = it + 1;

    const IterationRecord record{it, lr, loss, persons};
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.log.iterations.push_back(record);
    state.log.seconds.push_back(seconds);
    if (hooks.on_iteration) hooks.on_iteration(record, seconds);

    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (it + 1) % hooks.checkpoint_every == 0) {
      hooks.on_checkpoint(ck);
    }
    if (config.eval_every_epochs > 0 && (it + 1) % (epoch * config.eval_every_epochs) == 0) {
      const EvalSnapshot snap{it + 1, quick_pck(ck.weights, model, dataset, config.eval_images, 0.2, config.seed,
                                                config.threads)};
      state.log.snapshots.push_back(snap);
      if (hooks.on_snapshot) hooks.on_snapshot(snap);
    }
  }
  return state;
}

}  // namespace poseroi
