#pragma once

// Episodic accuracy with normal-approximation 95% intervals, fixed-set
// accuracy for refinement sessions, and report/panel writers.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "autoprotonet/core.hpp"
#include "autoprotonet/datasets.hpp"
#include "autoprotonet/image.hpp"
#include "autoprotonet/network.hpp"
#include "autoprotonet/protonet.hpp"
#include "autoprotonet/rng.hpp"

namespace apn {

/// Sample mean of `values`.
inline double mean_of(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("mean of an empty list");
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

/// 1.96 * sample standard deviation / sqrt(n); 0 for a single value.
inline double ci95_halfwidth(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n == 0) throw InvalidArgument("confidence interval of an empty list");
  if (n == 1) return 0.0;
  const double m = mean_of(values);
  double ss = 0;
  for (double v : values) ss += (v - m) * (v - m);
  return 1.96 * std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
}

/// Index of the closest prototype; ties go to the lowest class index.
inline int nearest_prototype(const PrototypeSet& prototypes, std::span<const float> query) {
  const auto d = prototype_distances(prototypes, query);
  return static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin());
}

struct EvaluationReport {
  int num_episodes = 0;
  int way = 0;
  int shot = 0;
  int query_count = 0;
  std::vector<double> per_episode_accuracy;
  double mean_accuracy = 0.0;
  double ci95_halfwidth = 0.0;
  std::optional<LossBreakdown> loss_means;

  static EvaluationReport from_accuracies(std::vector<double> accuracies, const EpisodeSpec& spec) {
    EvaluationReport r;
    r.num_episodes = static_cast<int>(accuracies.size());
    r.way = spec.way;
    r.shot = spec.shot;
    r.query_count = spec.query_count;
    r.mean_accuracy = mean_of(accuracies);
    r.ci95_halfwidth = apn::ci95_halfwidth(accuracies);
    r.per_episode_accuracy = std::move(accuracies);
    return r;
  }
};

inline nlohmann::json to_json(const LossBreakdown& l) {
  return {{"classification", l.classification}, {"reconstruction", l.reconstruction}, {"total", l.total},
          {"lambda", l.lambda}};
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json j = {{"num_episodes", r.num_episodes},
                      {"way", r.way},
                      {"shot", r.shot},
                      {"query_count", r.query_count},
                      {"mean_accuracy", r.mean_accuracy},
                      {"ci95_halfwidth", r.ci95_halfwidth},
                      {"per_episode_accuracy", r.per_episode_accuracy}};
  j["loss_means"] = r.loss_means ? to_json(*r.loss_means) : nlohmann::json(nullptr);
  return j;
}

inline EvaluationReport evaluation_report_from_json(const nlohmann::json& j) {
  EvaluationReport r;
  r.num_episodes = j.at("num_episodes").get<int>();
  r.way = j.at("way").get<int>();
  r.shot = j.at("shot").get<int>();
  r.query_count = j.at("query_count").get<int>();
  r.per_episode_accuracy = j.at("per_episode_accuracy").get<std::vector<double>>();
  r.mean_accuracy = j.at("mean_accuracy").get<double>();
  r.ci95_halfwidth = j.at("ci95_halfwidth").get<double>();
  if (j.contains("loss_means") && !j["loss_means"].is_null()) {
    const auto& l = j["loss_means"];
    r.loss_means = LossBreakdown{l.at("classification").get<double>(), l.at("reconstruction").get<double>(),
                                 l.at("total").get<double>(), l.at("lambda").get<double>()};
  }
  return r;
}

/// One line per episode: `episode,accuracy`.
inline std::string to_csv(const EvaluationReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "episode,accuracy\n";
  for (std::size_t i = 0; i < r.per_episode_accuracy.size(); ++i) out << i << ',' << r.per_episode_accuracy[i] << '\n';
  return out.str();
}

/// Fixed-width human summary.
inline std::string to_table(const EvaluationReport& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(2);
  out << "episodes  way  shot  query  accuracy (%)\n";
  out << std::string(43, '-') << '\n';
  out.width(8);
  out << r.num_episodes << "  ";
  out.width(3);
  out << r.way << "  ";
  out.width(4);
  out << r.shot << "  ";
  out.width(5);
  out << r.query_count << "  " << 100.0 * r.mean_accuracy << " +/- " << 100.0 * r.ci95_halfwidth << '\n';
  if (r.loss_means) {
    out.precision(4);
    out << "loss: classification " << r.loss_means->classification << ", reconstruction "
        << r.loss_means->reconstruction << '\n';
  }
  return out.str();
}

struct EpisodeOutcome {
  double accuracy = 0.0;
  double classification_loss = 0.0;
  double reconstruction_loss = 0.0;
};

/// Fine-tunes on the support set and scores argmin-distance predictions on
/// the queries (eval mode throughout).
inline EpisodeOutcome evaluate_episode(const Model<float>& model, const Episode& episode,
                                       Distance distance = Distance::SquaredEuclidean,
                                       bool with_reconstruction = false) {
  if (episode.query.empty()) throw InvalidArgument("episode has no queries");
  const auto adapted = finetune(model, episode.support, episode.class_names, distance);
  const auto query_images = images_of(episode.query);
  const auto query_labels = labels_of(episode.query);
  const EmbeddingMatrix zq = encode(model, query_images);
  int correct = 0;
  for (Eigen::Index q = 0; q < zq.rows(); ++q) {
    const std::span<const float> row(zq.row(q).data(), static_cast<std::size_t>(zq.cols()));
    correct += nearest_prototype(adapted.prototypes, row) == query_labels[static_cast<std::size_t>(q)] ? 1 : 0;
  }
  EpisodeOutcome out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(zq.rows());
  out.classification_loss = classification_loss(adapted.prototypes, zq, query_labels);
  if (with_reconstruction) {
    auto all = images_of(episode.support);
    all.insert(all.end(), query_images.begin(), query_images.end());
    out.reconstruction_loss = reconstruction_loss(all, decode(model, encode(model, all)));
  }
  return out;
}

struct EvaluationOptions {
  Distance distance = Distance::SquaredEuclidean;
  /// Also report mean reconstruction loss over each episode's images.
  bool with_reconstruction = false;
  double lambda = 1.0;
  /// Worker threads; results do not depend on this.
  int threads = 1;
};

/// Episode i is sampled with seed derive_seed(seed, {i}), so every episode is
/// independent of evaluation order and thread count.
inline EvaluationReport evaluate_episodic(const Model<float>& model, const ClassDataset& dataset,
                                          const EpisodeSpec& spec, int num_episodes = 600, std::uint64_t seed = 0,
                                          const EvaluationOptions& options = {}) {
  if (num_episodes < 1) throw InvalidArgument("num_episodes must be at least 1");
  if (dataset.resolution != model.config().input_resolution) {
    throw ShapeError("dataset resolution " + to_string(dataset.resolution) + " does not match model input " +
                     to_string(model.config().input_resolution));
  }
  // Fail fast on an unsatisfiable episode shape before spawning workers.
  {
    EpisodeSpec probe = spec;
    probe.seed = derive_seed(seed, {0});
    (void)sample_episode(dataset, probe);
  }
  std::vector<EpisodeOutcome> outcomes(static_cast<std::size_t>(num_episodes));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < num_episodes; i = next++) {
      EpisodeSpec s = spec;
      s.seed = derive_seed(seed, {static_cast<std::uint64_t>(i)});
      outcomes[static_cast<std::size_t>(i)] =
          evaluate_episode(model, sample_episode(dataset, s), options.distance, options.with_reconstruction);
    }
  };
  const int threads = std::clamp(options.threads, 1, num_episodes);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  std::vector<double> acc;
  double lc = 0, lr = 0;
  for (const auto& o : outcomes) {
    acc.push_back(o.accuracy);
    lc += o.classification_loss;
    lr += o.reconstruction_loss;
  }
  auto report = EvaluationReport::from_accuracies(std::move(acc), spec);
  const double n = static_cast<double>(num_episodes);
  report.loss_means = LossBreakdown::make(lc / n, options.with_reconstruction ? lr / n : 0.0,
                                          options.with_reconstruction ? options.lambda : 0.0);
  return report;
}

// ---------------------------------------------------------------------------
// Fixed labelled set

struct ImageResult {
  int label = 0;
  int predicted = 0;
  bool correct = false;
  ClassDistribution distribution;
};

struct FixedSetReport {
  double accuracy = 0.0;
  std::vector<ImageResult> per_image;

  /// Misclassified images whose true label is `class_index`.
  int misclassified(int class_index) const {
    int n = 0;
    for (const auto& r : per_image) n += (r.label == class_index && !r.correct) ? 1 : 0;
    return n;
  }
};

inline nlohmann::json to_json(const FixedSetReport& r) {
  auto items = nlohmann::json::array();
  for (const auto& x : r.per_image) {
    items.push_back({{"label", x.label},
                     {"predicted", x.predicted},
                     {"correct", x.correct},
                     {"probabilities", x.distribution.probabilities}});
  }
  int correct = 0;
  for (const auto& x : r.per_image) correct += x.correct ? 1 : 0;
  return {{"accuracy", r.accuracy},
          {"num_images", r.per_image.size()},
          {"num_correct", correct},
          {"per_image", items}};
}

/// Scores labelled images against fixed prototypes; prediction is the
/// nearest prototype with ties to the lowest class index.
inline FixedSetReport evaluate_fixed_set(const Model<float>& model, const PrototypeSet& prototypes,
                                         std::span<const LabeledImage> images) {
  for (const auto& it : images) {
    if (it.label < 0 || it.label >= prototypes.way()) {
      throw InvalidArgument("label " + std::to_string(it.label) + " outside the session's " +
                            std::to_string(prototypes.way()) + " classes");
    }
  }
  FixedSetReport report;
  if (images.empty()) return report;
  const auto z = encode(model, images_of(images));
  int correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto row = std::span<const float>(z.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(z.cols()));
    ImageResult r;
    r.label = images[i].label;
    r.predicted = nearest_prototype(prototypes, row);
    r.correct = r.predicted == r.label;
    r.distribution = classify(prototypes, row);
    correct += r.correct ? 1 : 0;
    report.per_image.push_back(std::move(r));
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(images.size());
  return report;
}

// ---------------------------------------------------------------------------
// Prototype panels

/// One row per class: that class's support images followed by the decoded
/// prototype. Shorter rows are padded with blank tiles.
inline ImageTensor prototype_panel(const Model<float>& model, const PrototypeSet& prototypes,
                                   std::span<const LabeledImage> support, int scale = 2) {
  const auto decoded = decode(model, prototypes.prototypes);
  std::vector<std::vector<ImageTensor>> rows(static_cast<std::size_t>(prototypes.way()));
  for (const auto& s : support) {
    if (s.label < 0 || s.label >= prototypes.way()) throw InvalidArgument("support label outside the prototype set");
    rows[static_cast<std::size_t>(s.label)].push_back(s.image);
  }
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.size());
  const auto res = model.config().input_resolution;
  std::vector<ImageTensor> tiles;
  for (int k = 0; k < prototypes.way(); ++k) {
    auto& r = rows[static_cast<std::size_t>(k)];
    while (r.size() < width) {
      ImageTensor blank(res.height, res.width);
      std::fill(blank.data().begin(), blank.data().end(), 1.0f);
      r.push_back(std::move(blank));
    }
    tiles.insert(tiles.end(), r.begin(), r.end());
    tiles.push_back(decoded[static_cast<std::size_t>(k)]);
  }
  return make_grid(tiles, static_cast<int>(width) + 1, scale);
}

}  // namespace apn
