#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace apn;
using namespace testing_support;

namespace {

const SplitDatasets& data16() {
  static const auto d = synthetic_splits({16, 16}, 12, 8, 6, 3, 3, 4);
  return d;
}

TrainingConfig tiny(Recipe r) {
  auto c = TrainingConfig::defaults(r);
  c.resolution = {16, 16};
  c.channels_per_block = 8;
  c.num_blocks = 2;
  c.epochs = 2;
  c.episodes_per_epoch = 3;
  c.way = 3;
  c.shot = 1;
  c.query_count = 2;
  c.validation_episodes = 2;
  c.validation_way = 3;
  c.validation_shot = 1;
  c.validation_query_count = 2;
  c.validation_images = 12;
  c.batch_size = 8;
  c.seed = 11;
  return c;
}

bool same_values(const ModelParameters& a, const ModelParameters& b, std::optional<ParamGroup> group = {}) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (group && a[i].group != *group) continue;
    if (a[i].values != b[i].values) return false;
  }
  return true;
}

}  // namespace

TEST(TrainingConfig, RecipeDefaults) {
  const auto c = TrainingConfig::defaults(Recipe::AutoProtoNet);
  EXPECT_EQ(c.epochs, 30);
  EXPECT_EQ(c.way, 20);
  EXPECT_EQ(c.shot, 5);
  EXPECT_EQ(c.query_count, 15);
  EXPECT_DOUBLE_EQ(c.lambda, 1.0);
  EXPECT_DOUBLE_EQ(c.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.weight_decay, 5e-4);
  EXPECT_DOUBLE_EQ(c.effective_schedule().rate_at(19), 0.1);
  EXPECT_DOUBLE_EQ(c.effective_schedule().rate_at(20), 0.06);
  EXPECT_EQ(c.tasks_per_batch, 1);

  const auto p = TrainingConfig::defaults(Recipe::AutoencoderPretrain);
  EXPECT_EQ(p.epochs, 20);
  EXPECT_NEAR(p.effective_schedule().rate_at(4), 0.1, 1e-15);
  EXPECT_NEAR(p.effective_schedule().rate_at(5), 0.01, 1e-15);
  EXPECT_DOUBLE_EQ(TrainingConfig::defaults(Recipe::ProtoNet).lambda, 0.0);
}

TEST(TrainingConfig, JsonRoundTripAndErrors) {
  const auto c = tiny(Recipe::AutoProtoNet);
  const auto back = training_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  try {
    training_config_from_json({{"epochs", 1}, {"learning_rat", 0.1}});
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rat"), std::string::npos);
  }
  try {
    training_config_from_json({{"recipe", "maml"}});
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("maml"), std::string::npos);
  }
  EXPECT_THROW(training_config_from_json({{"epochs", "ten"}}), InvalidArgument);
  EXPECT_THROW(training_config_from_json({{"way", 1}}), InvalidArgument);
  EXPECT_THROW(training_config_from_json({{"lambda", -1}}), InvalidArgument);
  EXPECT_THROW(training_config_from_json({{"resolution", {12, 12}}}), ShapeError);
  EXPECT_THROW(training_config_from_json({{"recipe", "autoprotonet-from-pretrained"}}), InvalidArgument);
}

TEST(Training, ZeroEpochsReturnsInitialModel) {
  auto c = tiny(Recipe::AutoProtoNet);
  c.epochs = 0;
  TempDir dir;
  TrainingOptions o;
  o.checkpoint_dir = dir.path();
  const auto r = train(data16(), c, o);
  const auto init = initialize_parameters(make_architecture({16, 16}, 8, 2), derive_seed(c.seed, {0}));
  EXPECT_TRUE(r.parameters == init);
  EXPECT_TRUE(r.log.episodes.empty());
  EXPECT_TRUE(r.log.epochs.empty());
  EXPECT_FALSE(fs::exists(dir / "last.ckpt"));
}

TEST(Training, DeterministicGivenSeed) {
  const auto c = tiny(Recipe::AutoProtoNet);
  const auto a = train(data16(), c);
  const auto b = train(data16(), c);
  EXPECT_TRUE(a.parameters == b.parameters);
  ASSERT_EQ(a.log.episodes.size(), b.log.episodes.size());
  for (std::size_t i = 0; i < a.log.episodes.size(); ++i) {
    EXPECT_EQ(a.log.episodes[i].total, b.log.episodes[i].total);
  }
  auto c2 = c;
  c2.seed = 12;
  EXPECT_FALSE(train(data16(), c2).parameters == a.parameters);
}

TEST(Training, LambdaZeroMatchesProtoNet) {
  auto ap = tiny(Recipe::AutoProtoNet);
  ap.lambda = 0.0;
  auto pn = ap;
  pn.recipe = Recipe::ProtoNet;
  const auto a = train(data16(), ap);
  const auto p = train(data16(), pn);
  ASSERT_EQ(a.log.episodes.size(), p.log.episodes.size());
  for (std::size_t i = 0; i < a.log.episodes.size(); ++i) {
    EXPECT_EQ(a.log.episodes[i].classification, p.log.episodes[i].classification);
    EXPECT_EQ(a.log.episodes[i].total, p.log.episodes[i].total);
    EXPECT_EQ(p.log.episodes[i].reconstruction, 0.0);
  }
  EXPECT_TRUE(same_values(a.parameters, p.parameters, ParamGroup::Encoder));
}

TEST(Training, ProtoNetUpdatesOnlyTheEncoder) {
  const auto c = tiny(Recipe::ProtoNet);
  const auto r = train(data16(), c);
  const auto init = initialize_parameters(make_architecture({16, 16}, 8, 2), derive_seed(c.seed, {0}));
  EXPECT_TRUE(same_values(r.parameters, init, ParamGroup::Decoder));
  EXPECT_FALSE(same_values(r.parameters, init, ParamGroup::Encoder));
}

TEST(Training, LogStreamCheckpointsAndRecordCounts) {
  auto c = tiny(Recipe::AutoProtoNet);
  c.epochs = 3;
  c.tasks_per_batch = 2;
  TempDir dir;
  std::ostringstream stream;
  int episodes_seen = 0, epochs_seen = 0;
  TrainingOptions o;
  o.checkpoint_dir = dir.path();
  o.log_stream = &stream;
  o.on_episode = [&](const EpisodeRecord&) { ++episodes_seen; };
  o.on_epoch = [&](const EpochRecord&) { ++epochs_seen; };
  const auto r = train(data16(), c, o);
  EXPECT_EQ(r.log.episodes.size(), 9u);
  EXPECT_EQ(episodes_seen, 9);
  EXPECT_EQ(epochs_seen, 3);
  for (const auto& e : r.log.episodes) {
    EXPECT_NEAR(e.total, e.classification + c.lambda * e.reconstruction, 1e-12);
    ASSERT_TRUE(e.accuracy.has_value());
    EXPECT_GE(*e.accuracy, 0.0);
    EXPECT_LE(*e.accuracy, 1.0);
  }
  for (const auto& e : r.log.epochs) ASSERT_TRUE(e.validation_accuracy.has_value());
  ASSERT_TRUE(r.best_epoch.has_value());

  const auto parsed = TrainingLog::from_ndjson(stream.str());
  EXPECT_EQ(parsed.to_ndjson(), r.log.to_ndjson());
  EXPECT_EQ(parsed.episodes.size(), 9u);

  EXPECT_TRUE(fs::exists(dir / "last.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "best.ckpt"));
  const auto last = load_checkpoint(dir / "last.ckpt");
  EXPECT_TRUE(last.parameters == r.parameters);
  EXPECT_EQ(last.metadata.at("epoch"), 2);
  EXPECT_EQ(last.metadata.at("recipe"), "autoprotonet");
  const auto best = load_checkpoint(dir / "best.ckpt");
  EXPECT_EQ(best.metadata.at("epoch"), *r.best_epoch);
}

TEST(Training, DivergenceIsReported) {
  auto c = tiny(Recipe::AutoProtoNet);
  c.learning_rate = 1e30;
  c.epochs = 4;
  try {
    train(data16(), c);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_FALSE(std::isfinite(e.record.total));
    for (const auto& r : e.log.episodes) EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
  }
}

TEST(Training, UnsatisfiableEpisodeAndResolutionMismatch) {
  auto c = tiny(Recipe::AutoProtoNet);
  c.way = 10;
  EXPECT_THROW(train(data16(), c), InvalidArgument);
  auto r = tiny(Recipe::AutoProtoNet);
  r.resolution = {32, 32};
  EXPECT_THROW(train(data16(), r), ShapeError);
  EXPECT_THROW(train_protonet(data16(), tiny(Recipe::AutoProtoNet)), InvalidArgument);
}

TEST(Pretrain, ReconstructionErrorDropsAndBaselineIsLogged) {
  auto c = tiny(Recipe::AutoencoderPretrain);
  c.epochs = 3;
  c.episodes_per_epoch = 20;
  c.lr_schedule = LrSchedule::constant(0.1);
  TempDir dir;
  TrainingOptions o;
  o.checkpoint_dir = dir.path();
  const auto r = train(data16(), c, o);
  ASSERT_TRUE(r.log.baseline.has_value());
  ASSERT_EQ(r.log.epochs.size(), 3u);
  EXPECT_LT(*r.log.epochs.back().validation_mse, *r.log.baseline->validation_mse);
  for (const auto& e : r.log.episodes) EXPECT_FALSE(e.accuracy.has_value());
  EXPECT_EQ(r.log.episodes.size(), 60u);

  // Warm start from the pretrained weights.
  auto f = tiny(Recipe::AutoProtoNetFromPretrained);
  f.initial_checkpoint = (dir / "last.ckpt").string();
  f.epochs = 0;
  EXPECT_TRUE(train(data16(), f).parameters == r.parameters);
  f.epochs = 1;
  EXPECT_EQ(train(data16(), f).log.episodes.size(), 3u);

  auto wrong = f;
  wrong.channels_per_block = 4;
  EXPECT_THROW(train(data16(), wrong), InvalidArgument);
  wrong = f;
  wrong.initial_checkpoint = (dir / "none.ckpt").string();
  EXPECT_THROW(train(data16(), wrong), IoError);
}
