#include <gtest/gtest.h>

#include "support.hpp"

using namespace apn;
using namespace testing_support;

namespace {

std::vector<Vec> rows_of(const EmbeddingMatrix& m) {
  std::vector<Vec> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Vec r;
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    out.push_back(r);
  }
  return out;
}

const ClassDataset& test16() {
  static const auto d = generate_synthetic_dataset(8, 10, {16, 16}, 3);
  return d;
}

// Classes of near-flat images in well separated colours.
ClassDataset flat_classes(int way, int images) {
  ClassDataset ds;
  ds.resolution = {16, 16};
  ds.split = Split::MetaTest;
  Rng rng(1);
  for (int k = 0; k < way; ++k) {
    ImageClass c{"flat" + std::to_string(k), {}};
    for (int i = 0; i < images; ++i) {
      ImageTensor img(16, 16);
      for (int ch = 0; ch < 3; ++ch)
        for (int p = 0; p < 256; ++p) {
          const double base = ((k >> ch) & 1) ? 0.9 : 0.1;
          img.at(ch, p / 16, p % 16) = static_cast<float>(base + rng.uniform(-0.01, 0.01));
        }
      c.images.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(c));
  }
  return ds;
}

}  // namespace

TEST(Statistics, MeanAndConfidenceInterval) {
  const std::vector<double> v = {0.6, 0.8, 0.4, 1.0, 0.6, 0.8, 0.2, 0.6, 0.4, 0.6};
  EXPECT_NEAR(mean_of(v), 0.6, 1e-12);
  // Sample deviation sqrt(0.48 / 9).
  EXPECT_NEAR(ci95_halfwidth(v), 1.96 * std::sqrt(0.48 / 9.0) / std::sqrt(10.0), 1e-12);
  EXPECT_EQ(ci95_halfwidth(std::vector<double>{0.3}), 0.0);
  EXPECT_THROW(mean_of(std::vector<double>{}), InvalidArgument);
}

TEST(EvaluateEpisodic, PerEpisodeAccuracyMatchesNearestPrototypeOracle) {
  const auto model = build_model(small_arch(), 2);
  const EpisodeSpec spec{4, 2, 3, std::nullopt};
  const auto report = evaluate_episodic(model, test16(), spec, 6, 9);
  ASSERT_EQ(report.per_episode_accuracy.size(), 6u);
  for (int i = 0; i < 6; ++i) {
    EpisodeSpec s = spec;
    s.seed = derive_seed(9, {static_cast<std::uint64_t>(i)});
    const auto ep = sample_episode(test16(), s);
    const auto protos = prototypes_oracle(rows_of(encode(model, images_of(ep.support))), labels_of(ep.support), 4);
    const auto q = rows_of(encode(model, images_of(ep.query)));
    int correct = 0;
    for (std::size_t j = 0; j < q.size(); ++j) correct += nearest_oracle(protos, q[j]) == ep.query[j].label;
    EXPECT_DOUBLE_EQ(report.per_episode_accuracy[i], correct / 12.0) << "episode " << i;
  }
  double m = 0;
  for (double a : report.per_episode_accuracy) m += a;
  EXPECT_NEAR(report.mean_accuracy, m / 6, 1e-12);
  EXPECT_EQ(report.way, 4);
  EXPECT_EQ(report.shot, 2);
  EXPECT_EQ(report.query_count, 3);
}

TEST(EvaluateEpisodic, QueryOrderDoesNotMatter) {
  const auto model = build_model(small_arch(), 2);
  auto ep = sample_episode(test16(), {4, 1, 4, 5});
  const auto before = evaluate_episode(model, ep);
  std::reverse(ep.query.begin(), ep.query.end());
  const auto after = evaluate_episode(model, ep);
  EXPECT_EQ(before.accuracy, after.accuracy);
  EXPECT_NEAR(before.classification_loss, after.classification_loss, 1e-9);
}

TEST(EvaluateEpisodic, ConstantEmbeddingsGiveChance) {
  auto model = build_model(small_arch(), 2);
  for (auto name : {"encoder.block1.bn.weight", "encoder.block1.bn.bias"}) {
    auto& v = model.parameters().at(name).values;
    std::fill(v.begin(), v.end(), 0.0f);
  }
  const auto report = evaluate_episodic(model, test16(), {5, 1, 3, std::nullopt}, 4, 0);
  // Every distance ties, so every query is assigned class 0.
  for (double a : report.per_episode_accuracy) EXPECT_DOUBLE_EQ(a, 0.2);
  EXPECT_NEAR(report.loss_means->classification, std::log(5.0), 1e-6);
}

TEST(EvaluateEpisodic, SeparableSingleEpisode) {
  const auto model = build_model(small_arch(), 2);
  const auto ds = flat_classes(5, 6);
  const auto report = evaluate_episodic(model, ds, {5, 1, 5, std::nullopt}, 1, 0);
  EXPECT_EQ(report.mean_accuracy, 1.0);
  EXPECT_EQ(report.ci95_halfwidth, 0.0);
}

TEST(EvaluateEpisodic, ThreadCountAndReproducibility) {
  const auto model = build_model(small_arch(), 2);
  const EpisodeSpec spec{3, 1, 2, std::nullopt};
  EvaluationOptions one, four;
  four.threads = 4;
  const auto a = evaluate_episodic(model, test16(), spec, 10, 3, one);
  const auto b = evaluate_episodic(model, test16(), spec, 10, 3, four);
  EXPECT_EQ(a.per_episode_accuracy, b.per_episode_accuracy);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  const auto c = evaluate_episodic(model, test16(), spec, 10, 4, one);
  EXPECT_NE(a.per_episode_accuracy, c.per_episode_accuracy);
}

TEST(EvaluateEpisodic, ReconstructionLossAndErrors) {
  const auto model = build_model(small_arch(), 2);
  EvaluationOptions o;
  o.with_reconstruction = true;
  o.lambda = 0.5;
  const auto r = evaluate_episodic(model, test16(), {3, 1, 2, std::nullopt}, 2, 0, o);
  ASSERT_TRUE(r.loss_means.has_value());
  EXPECT_GT(r.loss_means->reconstruction, 0.0);
  EXPECT_NEAR(r.loss_means->total, r.loss_means->classification + 0.5 * r.loss_means->reconstruction, 1e-12);
  EXPECT_THROW(evaluate_episodic(model, test16(), {9, 1, 2, std::nullopt}, 2), InvalidArgument);
  EXPECT_THROW(evaluate_episodic(model, test16(), {3, 1, 2, std::nullopt}, 0), InvalidArgument);
  const auto big = generate_synthetic_dataset(3, 4, {32, 32}, 0);
  EXPECT_THROW(evaluate_episodic(model, big, {3, 1, 2, std::nullopt}, 1), ShapeError);
}

TEST(EvaluationReport, JsonCsvAndTable) {
  auto r = EvaluationReport::from_accuracies({0.5, 1.0, 0.75}, {5, 1, 15, std::nullopt});
  r.loss_means = LossBreakdown::make(1.0, 0.2, 1.0);
  const auto j = to_json(r);
  EXPECT_EQ(j.at("num_episodes"), 3);
  EXPECT_EQ(j.at("per_episode_accuracy").size(), 3u);
  const auto back = evaluation_report_from_json(j);
  EXPECT_EQ(back.per_episode_accuracy, r.per_episode_accuracy);
  EXPECT_EQ(back.mean_accuracy, r.mean_accuracy);
  EXPECT_EQ(back.loss_means->reconstruction, 0.2);
  EXPECT_EQ(to_csv(r), "episode,accuracy\n0,0.5\n1,1\n2,0.75\n");
  EXPECT_NE(to_table(r).find("75.00"), std::string::npos);
}

TEST(FixedSet, ScoresAndTieRule) {
  const auto model = build_model(small_arch(), 2);
  const auto ds = flat_classes(3, 4);
  std::vector<LabeledImage> support, eval;
  for (int k = 0; k < 3; ++k) {
    support.push_back({ds.classes[k].images[0], k});
    for (int i = 1; i < 4; ++i) eval.push_back({ds.classes[k].images[i], k});
  }
  const auto adapted = finetune(model, support);
  const auto r = evaluate_fixed_set(model, adapted.prototypes, eval);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.per_image.size(), 9u);
  EXPECT_EQ(r.misclassified(0), 0);
  EXPECT_EQ(to_json(r).at("num_correct"), 9);

  // Two identical prototypes: ties go to the lower index.
  PrototypeSet tied = adapted.prototypes;
  tied.prototypes.row(1) = tied.prototypes.row(0);
  const auto t = evaluate_fixed_set(model, tied, std::span(eval).subspan(3, 3));
  for (const auto& x : t.per_image) EXPECT_EQ(x.predicted, 0);
  EXPECT_EQ(t.misclassified(1), 3);

  EXPECT_TRUE(evaluate_fixed_set(model, adapted.prototypes, std::vector<LabeledImage>{}).per_image.empty());
  const std::vector<LabeledImage> bad = {{ds.classes[0].images[1], 3}};
  EXPECT_THROW(evaluate_fixed_set(model, adapted.prototypes, bad), InvalidArgument);
}

TEST(PrototypePanel, Layout) {
  const auto model = build_model(small_arch(), 2);
  const auto ep = sample_episode(test16(), {3, 2, 1, 0});
  const auto adapted = finetune(model, ep.support, ep.class_names);
  const auto panel = prototype_panel(model, adapted.prototypes, ep.support, 1);
  // 3 rows of (2 support + 1 prototype) tiles with 2-pixel gaps.
  EXPECT_EQ(panel.height(), 3 * 16 + 4 * 2);
  EXPECT_EQ(panel.width(), 3 * 16 + 4 * 2);
}
