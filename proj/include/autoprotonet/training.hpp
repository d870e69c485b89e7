#pragma once

// Meta-training loops (ProtoNet, AutoProtoNet), plain autoencoder pretraining,
// their configuration and NDJSON logs.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "autoprotonet/checkpoint.hpp"
#include "autoprotonet/core.hpp"
#include "autoprotonet/datasets.hpp"
#include "autoprotonet/evaluation.hpp"
#include "autoprotonet/network.hpp"
#include "autoprotonet/optimizer.hpp"
#include "autoprotonet/protonet.hpp"
#include "autoprotonet/rng.hpp"

namespace apn {

enum class Recipe { ProtoNet, AutoProtoNet, AutoencoderPretrain, AutoProtoNetFromPretrained };

inline std::string to_string(Recipe r) {
  switch (r) {
    case Recipe::ProtoNet: return "protonet";
    case Recipe::AutoProtoNet: return "autoprotonet";
    case Recipe::AutoencoderPretrain: return "autoencoder-pretrain";
    case Recipe::AutoProtoNetFromPretrained: return "autoprotonet-from-pretrained";
  }
  return "unknown";
}

inline Recipe recipe_from_string(const std::string& s) {
  for (auto r : {Recipe::ProtoNet, Recipe::AutoProtoNet, Recipe::AutoencoderPretrain,
                 Recipe::AutoProtoNetFromPretrained}) {
    if (to_string(r) == s) return r;
  }
  throw InvalidArgument("unknown recipe '" + s +
                        "' (expected protonet, autoprotonet, autoencoder-pretrain or autoprotonet-from-pretrained)");
}

struct TrainingConfig {
  Recipe recipe = Recipe::AutoProtoNet;
  int epochs = 30;
  int episodes_per_epoch = 100;
  int way = 20;
  int shot = 5;
  int query_count = 15;
  double lambda = 1.0;
  double learning_rate = 0.1;
  /// Base rate comes from learning_rate; see effective_schedule().
  LrSchedule lr_schedule = LrSchedule::steps(0.1, {{20, 0.06}});
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int tasks_per_batch = 1;
  std::uint64_t seed = 0;

  Resolution resolution{32, 32};
  int channels_per_block = 64;
  int num_blocks = 4;
  Distance distance = Distance::SquaredEuclidean;

  /// Minibatch size for autoencoder-pretrain (one step per "episode").
  int batch_size = 64;

  /// Meta-validation after every epoch; 0 episodes disables it.
  int validation_episodes = 100;
  int validation_way = 5;
  int validation_shot = 5;
  int validation_query_count = 15;
  /// Images used for the reconstruction validation of autoencoder-pretrain.
  int validation_images = 200;

  /// Starting weights; required by autoprotonet-from-pretrained.
  std::string initial_checkpoint;

  /// Recipe defaults: the episodic recipes share one setting; the autoencoder
  /// runs 20 epochs and divides the rate by 10 every 5 epochs.
  static TrainingConfig defaults(Recipe r) {
    TrainingConfig c;
    c.recipe = r;
    if (r == Recipe::AutoencoderPretrain) {
      c.epochs = 20;
      c.lr_schedule = LrSchedule::decay(0.1, 0.1, 5);
      c.lambda = 1.0;
    }
    if (r == Recipe::ProtoNet) c.lambda = 0.0;
    return c;
  }

  LrSchedule effective_schedule() const { return lr_schedule.with_base(learning_rate); }

  EpisodeSpec episode_spec() const { return {way, shot, query_count, std::nullopt}; }
  EpisodeSpec validation_spec() const { return {validation_way, validation_shot, validation_query_count, std::nullopt}; }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw InvalidArgument(msg);
    };
    need(epochs >= 0, "epochs must be >= 0");
    need(episodes_per_epoch >= 1, "episodes_per_epoch must be >= 1");
    need(way >= 2, "way must be >= 2");
    need(shot >= 1, "shot must be >= 1");
    need(query_count >= 1, "query_count must be >= 1");
    need(std::isfinite(lambda) && lambda >= 0, "lambda must be finite and >= 0");
    need(std::isfinite(learning_rate) && learning_rate > 0, "learning_rate must be positive");
    need(momentum >= 0 && momentum < 1, "momentum must be in [0, 1)");
    need(weight_decay >= 0, "weight_decay must be >= 0");
    need(tasks_per_batch >= 1, "tasks_per_batch must be >= 1");
    need(batch_size >= 2, "batch_size must be >= 2 (batch normalisation needs two samples)");
    need(validation_episodes >= 0, "validation_episodes must be >= 0");
    need(validation_way >= 2 && validation_shot >= 1 && validation_query_count >= 1,
         "validation way/shot/query_count must be positive (way >= 2)");
    need(validation_images >= 1, "validation_images must be >= 1");
    (void)effective_schedule();
    (void)make_architecture(resolution, channels_per_block, num_blocks);
    if (recipe == Recipe::AutoProtoNetFromPretrained) {
      need(!initial_checkpoint.empty(), "recipe autoprotonet-from-pretrained needs initial_checkpoint");
    }
  }
};

inline nlohmann::json to_json(const TrainingConfig& c) {
  return {{"recipe", to_string(c.recipe)},
          {"epochs", c.epochs},
          {"episodes_per_epoch", c.episodes_per_epoch},
          {"way", c.way},
          {"shot", c.shot},
          {"query_count", c.query_count},
          {"lambda", c.lambda},
          {"learning_rate", c.learning_rate},
          {"lr_schedule", c.lr_schedule.to_json()},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"tasks_per_batch", c.tasks_per_batch},
          {"seed", c.seed},
          {"resolution", {c.resolution.height, c.resolution.width}},
          {"channels_per_block", c.channels_per_block},
          {"num_blocks", c.num_blocks},
          {"distance", to_string(c.distance)},
          {"batch_size", c.batch_size},
          {"validation_episodes", c.validation_episodes},
          {"validation_way", c.validation_way},
          {"validation_shot", c.validation_shot},
          {"validation_query_count", c.validation_query_count},
          {"validation_images", c.validation_images},
          {"initial_checkpoint", c.initial_checkpoint}};
}

/// Starts from the defaults of the recipe named in `j` (or autoprotonet) and
/// applies every field present. Unknown keys are rejected.
inline TrainingConfig training_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("training config must be a JSON object");
  const Recipe r = j.contains("recipe") ? recipe_from_string(j["recipe"].get<std::string>()) : Recipe::AutoProtoNet;
  TrainingConfig c = TrainingConfig::defaults(r);
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "recipe") continue;
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "episodes_per_epoch") c.episodes_per_epoch = v.get<int>();
      else if (key == "way") c.way = v.get<int>();
      else if (key == "shot") c.shot = v.get<int>();
      else if (key == "query_count") c.query_count = v.get<int>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "lr_schedule") c.lr_schedule = LrSchedule::from_json(v, j.value("learning_rate", c.learning_rate));
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "tasks_per_batch") c.tasks_per_batch = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "resolution") c.resolution = {v.at(0).get<int>(), v.at(1).get<int>()};
      else if (key == "channels_per_block") c.channels_per_block = v.get<int>();
      else if (key == "num_blocks") c.num_blocks = v.get<int>();
      else if (key == "distance") c.distance = distance_from_string(v.get<std::string>());
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "validation_episodes") c.validation_episodes = v.get<int>();
      else if (key == "validation_way") c.validation_way = v.get<int>();
      else if (key == "validation_shot") c.validation_shot = v.get<int>();
      else if (key == "validation_query_count") c.validation_query_count = v.get<int>();
      else if (key == "validation_images") c.validation_images = v.get<int>();
      else if (key == "initial_checkpoint") c.initial_checkpoint = v.get<std::string>();
      else throw InvalidArgument("unknown training config field '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Log

struct EpisodeRecord {
  int epoch = 0;
  int episode = 0;
  double classification = 0.0;
  double reconstruction = 0.0;
  double total = 0.0;
  std::optional<double> accuracy;  // absent for autoencoder-pretrain
  double learning_rate = 0.0;
  double wall_clock = 0.0;  // seconds since training started
};

struct EpochRecord {
  int epoch = -1;  // -1 is the pre-training baseline
  double learning_rate = 0.0;
  std::optional<double> validation_accuracy;
  std::optional<double> validation_ci95;
  std::optional<double> validation_mse;
};

namespace detail {

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const EpisodeRecord& r) {
  return {{"type", "episode"},
          {"epoch", r.epoch},
          {"episode", r.episode},
          {"classification_loss", r.classification},
          {"reconstruction_loss", r.reconstruction},
          {"total_loss", r.total},
          {"accuracy", detail::opt(r.accuracy)},
          {"learning_rate", r.learning_rate},
          {"wall_clock", r.wall_clock}};
}

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"type", r.epoch < 0 ? "baseline" : "epoch"},
          {"epoch", r.epoch},
          {"learning_rate", r.learning_rate},
          {"validation_accuracy", detail::opt(r.validation_accuracy)},
          {"validation_ci95", detail::opt(r.validation_ci95)},
          {"validation_mse", detail::opt(r.validation_mse)}};
}

struct TrainingLog {
  std::optional<EpochRecord> baseline;
  std::vector<EpisodeRecord> episodes;
  std::vector<EpochRecord> epochs;

  std::string to_ndjson() const {
    std::string out;
    if (baseline) out += to_json(*baseline).dump() + "\n";
    std::size_t e = 0;
    for (const auto& r : episodes) {
      // Keep epoch summaries after their epoch's episodes.
      while (e < epochs.size() && epochs[e].epoch < r.epoch) out += to_json(epochs[e++]).dump() + "\n";
      out += to_json(r).dump() + "\n";
    }
    while (e < epochs.size()) out += to_json(epochs[e++]).dump() + "\n";
    return out;
  }

  static TrainingLog from_ndjson(const std::string& text) {
    TrainingLog log;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "episode") {
        EpisodeRecord r;
        r.epoch = j.at("epoch").get<int>();
        r.episode = j.at("episode").get<int>();
        r.classification = j.at("classification_loss").get<double>();
        r.reconstruction = j.at("reconstruction_loss").get<double>();
        r.total = j.at("total_loss").get<double>();
        r.accuracy = detail::opt_from(j, "accuracy");
        r.learning_rate = j.at("learning_rate").get<double>();
        r.wall_clock = j.at("wall_clock").get<double>();
        log.episodes.push_back(r);
      } else {
        EpochRecord r;
        r.epoch = j.at("epoch").get<int>();
        r.learning_rate = j.at("learning_rate").get<double>();
        r.validation_accuracy = detail::opt_from(j, "validation_accuracy");
        r.validation_ci95 = detail::opt_from(j, "validation_ci95");
        r.validation_mse = detail::opt_from(j, "validation_mse");
        if (type == "baseline") log.baseline = r;
        else log.epochs.push_back(r);
      }
    }
    return log;
  }
};

/// Thrown when a step produces a non-finite loss; no update is applied for
/// that step. `record` is the offending step, `log` everything before it.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(EpisodeRecord record, TrainingLog log)
      : Error("training diverged at epoch " + std::to_string(record.epoch) + ", episode " +
              std::to_string(record.episode) + " (classification " + std::to_string(record.classification) +
              ", reconstruction " + std::to_string(record.reconstruction) + ")"),
        record(record),
        log(std::move(log)) {}

  EpisodeRecord record;
  TrainingLog log;
};

struct TrainingOptions {
  /// When set, `last.ckpt` is written after every epoch and `best.ckpt`
  /// whenever meta-validation improves (or every epoch without validation).
  std::optional<std::filesystem::path> checkpoint_dir;
  /// NDJSON records are streamed here as they are produced.
  std::ostream* log_stream = nullptr;
  std::function<void(const EpisodeRecord&)> on_episode;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainingResult {
  ArchitectureConfig architecture;
  ModelParameters parameters;
  TrainingLog log;
  std::optional<int> best_epoch;
  std::optional<double> best_validation_accuracy;
};

namespace detail {

struct StepLosses {
  double classification = 0.0;
  double reconstruction = 0.0;
  double accuracy = 0.0;
};

/// Forward + backward for one task; gradients accumulate into the model.
/// With lambda == 0 the reconstruction is computed for the log only and its
/// gradient path is detached.
inline StepLosses episodic_task(Model<float>& model, const Episode& ep, bool reconstruct, double lambda,
                                Distance distance) {
  auto images = images_of(ep.support);
  const auto query = images_of(ep.query);
  images.insert(images.end(), query.begin(), query.end());
  auto labels = labels_of(ep.support);
  const auto query_labels = labels_of(ep.query);
  labels.insert(labels.end(), query_labels.begin(), query_labels.end());

  const auto x = images_to_batch<float>(images, model.config().input_resolution);
  const MatrixRM<float> z = model.encode_train(x);
  auto pl = prototypical_loss_with_grad<float>(z, labels, ep.support.size(), static_cast<int>(ep.class_names.size()),
                                               distance);
  StepLosses out{static_cast<double>(pl.loss), 0.0, pl.accuracy()};
  MatrixRM<float> dz = std::move(pl.grad);
  if (reconstruct) {
    const auto rec = model.decode_train(z);
    auto mse = mse_with_grad(rec, x);
    out.reconstruction = static_cast<double>(mse.loss);
    if (lambda != 0.0) {
      const auto scale = static_cast<float>(lambda);
      for (auto& g : mse.grad.data) g *= scale;
      dz += model.backward_decoder(std::move(mse.grad));
    }
  }
  model.backward_encoder(dz);
  return out;
}

inline void scale_gradients(Model<float>& model, float s) {
  for (auto& g : model.gradients())
    for (auto& v : g) v *= s;
}

inline nlohmann::json checkpoint_metadata(const TrainingConfig& c, int epoch, const std::optional<double>& val) {
  return {{"recipe", to_string(c.recipe)},
          {"epoch", epoch},
          {"validation_accuracy", opt(val)},
          {"training_config", to_json(c)}};
}

class Run {
 public:
  Run(const TrainingConfig& c, const TrainingOptions& o) : cfg(c), opts(o), start(std::chrono::steady_clock::now()) {}

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }

  void emit(const EpisodeRecord& r) {
    if (!std::isfinite(r.total) || !std::isfinite(r.classification) || !std::isfinite(r.reconstruction)) {
      throw TrainingDiverged(r, log);
    }
    log.episodes.push_back(r);
    if (opts.log_stream) *opts.log_stream << to_json(r).dump() << '\n';
    if (opts.on_episode) opts.on_episode(r);
  }

  void emit(const EpochRecord& r) {
    if (r.epoch < 0) log.baseline = r;
    else log.epochs.push_back(r);
    if (opts.log_stream) *opts.log_stream << to_json(r).dump() << '\n' << std::flush;
    if (opts.on_epoch) opts.on_epoch(r);
  }

  /// Checkpoints after an epoch; `score` is higher-is-better.
  void end_epoch(const Model<float>& model, int epoch, std::optional<double> score,
                 std::optional<double> accuracy) {
    const bool improved = !best_score || !score || *score > *best_score;
    if (improved) {
      best_score = score;
      result_best_epoch = epoch;
      result_best_accuracy = accuracy;
    }
    if (!opts.checkpoint_dir) return;
    const auto meta = checkpoint_metadata(cfg, epoch, accuracy);
    save_checkpoint(model.parameters(), model.config(), meta, *opts.checkpoint_dir / "last.ckpt");
    if (improved) save_checkpoint(model.parameters(), model.config(), meta, *opts.checkpoint_dir / "best.ckpt");
  }

  TrainingResult finish(const Model<float>& model) {
    return {model.config(), model.parameters(), std::move(log), result_best_epoch, result_best_accuracy};
  }

  const TrainingConfig& cfg;
  const TrainingOptions& opts;
  TrainingLog log;

 private:
  std::chrono::steady_clock::time_point start;
  std::optional<double> best_score;
  std::optional<int> result_best_epoch;
  std::optional<double> result_best_accuracy;
};

inline void check_dataset(const ClassDataset& ds, const TrainingConfig& c) {
  if (ds.classes.empty()) throw InvalidArgument("meta-train split is empty");
  if (ds.resolution != c.resolution) {
    throw ShapeError("dataset resolution " + to_string(ds.resolution) + " does not match configured resolution " +
                     to_string(c.resolution));
  }
}

/// Fresh weights from seed, or the configured initial checkpoint.
inline Model<float> initial_model(const TrainingConfig& c) {
  const auto arch = make_architecture(c.resolution, c.channels_per_block, c.num_blocks);
  if (c.initial_checkpoint.empty()) return build_model(arch, derive_seed(c.seed, {0}));
  auto ck = load_checkpoint(c.initial_checkpoint);
  if (ck.architecture != arch) {
    throw InvalidArgument("initial checkpoint architecture (" + to_string(ck.architecture.input_resolution) + ", " +
                          std::to_string(ck.architecture.channels_per_block) + " channels, " +
                          std::to_string(ck.architecture.num_blocks) + " blocks) does not match the training config");
  }
  return Model<float>(std::move(ck.architecture), std::move(ck.parameters));
}

inline TrainingResult train_episodic(const SplitDatasets& data, const TrainingConfig& cfg,
                                     const TrainingOptions& opts, bool reconstruct) {
  cfg.validate();
  check_dataset(data.meta_train, cfg);
  Model<float> model = initial_model(cfg);
  Run run(cfg, opts);
  if (cfg.epochs == 0) return run.finish(model);

  // Fail on an unsatisfiable episode shape before doing any work.
  {
    Rng probe(0);
    (void)sample_episode(data.meta_train, cfg.episode_spec(), probe);
  }
  const bool validate = cfg.validation_episodes > 0 &&
                        static_cast<int>(data.meta_val.classes.size()) >= cfg.validation_way;

  MomentumSgd<float> sgd({cfg.momentum, cfg.weight_decay, true});
  const auto schedule = cfg.effective_schedule();
  const std::optional<ParamGroup> only =
      reconstruct ? std::nullopt : std::optional<ParamGroup>(ParamGroup::Encoder);
  Rng episodes(derive_seed(cfg.seed, {1}));
  const std::uint64_t val_seed = derive_seed(cfg.seed, {2});
  const auto n = cfg.tasks_per_batch;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = schedule.rate_at(epoch);
    for (int e = 0; e < cfg.episodes_per_epoch; ++e) {
      model.zero_grad();
      StepLosses sum;
      for (int t = 0; t < n; ++t) {
        const Episode ep = sample_episode(data.meta_train, cfg.episode_spec(), episodes);
        const auto s = episodic_task(model, ep, reconstruct, cfg.lambda, cfg.distance);
        sum.classification += s.classification;
        sum.reconstruction += s.reconstruction;
        sum.accuracy += s.accuracy;
      }
      if (n > 1) scale_gradients(model, 1.0f / static_cast<float>(n));
      EpisodeRecord r;
      r.epoch = epoch;
      r.episode = e;
      r.classification = sum.classification / n;
      r.reconstruction = sum.reconstruction / n;
      r.total = r.classification + (reconstruct ? cfg.lambda * r.reconstruction : 0.0);
      r.accuracy = sum.accuracy / n;
      r.learning_rate = lr;
      r.wall_clock = run.elapsed();
      run.emit(r);
      sgd.step(model.parameters(), model.gradients(), lr, only);
    }
    EpochRecord er;
    er.epoch = epoch;
    er.learning_rate = lr;
    if (validate) {
      const auto rep = evaluate_episodic(model, data.meta_val, cfg.validation_spec(), cfg.validation_episodes,
                                         val_seed, {cfg.distance});
      er.validation_accuracy = rep.mean_accuracy;
      er.validation_ci95 = rep.ci95_halfwidth;
    }
    run.emit(er);
    run.end_epoch(model, epoch, er.validation_accuracy, er.validation_accuracy);
  }
  return run.finish(model);
}

/// Up to `count` images taken round-robin across classes.
inline std::vector<ImageTensor> spread_images(const ClassDataset& ds, int count) {
  std::vector<ImageTensor> out;
  for (std::size_t i = 0; static_cast<int>(out.size()) < count; ++i) {
    bool any = false;
    for (const auto& c : ds.classes) {
      if (i < c.images.size() && static_cast<int>(out.size()) < count) {
        out.push_back(c.images[i]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

}  // namespace detail

/// Plain ProtoNet meta-training: only encoder parameters are updated.
inline TrainingResult train_protonet(const SplitDatasets& data, const TrainingConfig& config,
                                     const TrainingOptions& options = {}) {
  if (config.recipe != Recipe::ProtoNet) throw InvalidArgument("train_protonet needs recipe protonet");
  return detail::train_episodic(data, config, options, false);
}

/// Joint loss L_C + lambda * L_R on every episode, updating encoder and
/// decoder together.
inline TrainingResult train_autoprotonet(const SplitDatasets& data, const TrainingConfig& config,
                                         const TrainingOptions& options = {}) {
  if (config.recipe != Recipe::AutoProtoNet && config.recipe != Recipe::AutoProtoNetFromPretrained) {
    throw InvalidArgument("train_autoprotonet needs recipe autoprotonet or autoprotonet-from-pretrained");
  }
  return detail::train_episodic(data, config, options, true);
}

/// Minibatch MSE training of encoder + decoder on meta-train images. Each
/// epoch is `episodes_per_epoch` steps over a reshuffled image stream.
inline TrainingResult pretrain_autoencoder(const SplitDatasets& data, const TrainingConfig& cfg,
                                           const TrainingOptions& opts = {}) {
  if (cfg.recipe != Recipe::AutoencoderPretrain) throw InvalidArgument("pretrain_autoencoder needs recipe autoencoder-pretrain");
  cfg.validate();
  detail::check_dataset(data.meta_train, cfg);
  Model<float> model = detail::initial_model(cfg);
  detail::Run run(cfg, opts);
  if (cfg.epochs == 0) return run.finish(model);

  std::vector<const ImageTensor*> pool;
  for (const auto& c : data.meta_train.classes)
    for (const auto& img : c.images) pool.push_back(&img);
  const auto& val_source = data.meta_val.classes.empty() ? data.meta_train : data.meta_val;
  const auto val_images = detail::spread_images(val_source, cfg.validation_images);
  auto val_mse = [&] { return reconstruction_loss(val_images, decode(model, encode(model, val_images))); };

  EpochRecord baseline;
  baseline.learning_rate = cfg.effective_schedule().rate_at(0);
  baseline.validation_mse = val_mse();
  run.emit(baseline);

  MomentumSgd<float> sgd({cfg.momentum, cfg.weight_decay, true});
  const auto schedule = cfg.effective_schedule();
  Rng rng(derive_seed(cfg.seed, {1}));
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span(order));
  std::size_t cursor = 0;
  const auto batch = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), pool.size()));
  if (batch < 2) throw InvalidArgument("autoencoder-pretrain needs at least 2 meta-train images");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = schedule.rate_at(epoch);
    for (int e = 0; e < cfg.episodes_per_epoch; ++e) {
      std::vector<ImageTensor> images;
      images.reserve(batch);
      while (images.size() < batch) {
        if (cursor == order.size()) {
          rng.shuffle(std::span(order));
          cursor = 0;
        }
        images.push_back(*pool[order[cursor++]]);
      }
      model.zero_grad();
      const auto x = images_to_batch<float>(images, model.config().input_resolution);
      const auto z = model.encode_train(x);
      const auto rec = model.decode_train(z);
      auto mse = mse_with_grad(rec, x);
      model.backward_encoder(model.backward_decoder(std::move(mse.grad)));
      EpisodeRecord r;
      r.epoch = epoch;
      r.episode = e;
      r.reconstruction = static_cast<double>(mse.loss);
      r.total = r.reconstruction;
      r.learning_rate = lr;
      r.wall_clock = run.elapsed();
      run.emit(r);
      sgd.step(model.parameters(), model.gradients(), lr);
    }
    EpochRecord er;
    er.epoch = epoch;
    er.learning_rate = lr;
    er.validation_mse = val_mse();
    run.emit(er);
    run.end_epoch(model, epoch, -*er.validation_mse, std::nullopt);
  }
  return run.finish(model);
}

/// Dispatches on config.recipe.
inline TrainingResult train(const SplitDatasets& data, const TrainingConfig& config,
                            const TrainingOptions& options = {}) {
  switch (config.recipe) {
    case Recipe::ProtoNet: return train_protonet(data, config, options);
    case Recipe::AutoProtoNet:
    case Recipe::AutoProtoNetFromPretrained: return train_autoprotonet(data, config, options);
    case Recipe::AutoencoderPretrain: return pretrain_autoencoder(data, config, options);
  }
  throw InvalidArgument("unknown recipe");
}

}  // namespace apn
