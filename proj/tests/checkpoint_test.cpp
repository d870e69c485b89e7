#include <gtest/gtest.h>

#include "support.hpp"

using namespace apn;
using namespace testing_support;

namespace {

using Kind = CheckpointError::Kind;

// Rewrites manifest.json inside a checkpoint archive.
std::vector<std::uint8_t> edit_manifest(const std::vector<std::uint8_t>& bytes,
                                        const std::function<void(nlohmann::json&)>& edit) {
  auto entries = zip::read_archive(bytes);
  auto& raw = entries.at("manifest.json");
  auto j = nlohmann::json::parse(raw.begin(), raw.end());
  edit(j);
  const auto text = j.dump();
  return zip::write_archive({{"manifest.json", zip::Bytes(text.begin(), text.end())},
                             {"tensors.bin", entries.at("tensors.bin")}});
}

Kind kind_of(std::span<const std::uint8_t> bytes, std::string* message = nullptr) {
  try {
    checkpoint_from_bytes(bytes);
  } catch (const CheckpointError& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint loaded unexpectedly";
  return Kind::Malformed;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const auto model = build_model(make_architecture({32, 32}, 16, 4), 4);
  const nlohmann::json meta = {{"epoch", 3}, {"note", "x"}};
  save_checkpoint(model.parameters(), model.config(), meta, dir / "sub" / "m.ckpt");
  const auto ck = load_checkpoint(dir / "sub" / "m.ckpt");
  EXPECT_EQ(ck.architecture, model.config());
  EXPECT_EQ(ck.metadata, meta);
  ASSERT_EQ(ck.parameters.size(), model.parameters().size());
  for (std::size_t i = 0; i < ck.parameters.size(); ++i) {
    const auto& a = ck.parameters[i];
    const auto& b = model.parameters()[i];
    EXPECT_EQ(a.name, b.name);
    EXPECT_EQ(a.shape, b.shape);
    EXPECT_EQ(a.trainable, b.trainable);
    ASSERT_EQ(std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)), 0) << a.name;
  }
  // Same outputs from the reloaded model.
  Model<float> again(ck.architecture, ck.parameters);
  Rng rng(1);
  const std::vector<ImageTensor> imgs = {random_image(rng, {32, 32})};
  EXPECT_TRUE(encode(again, imgs) == encode(model, imgs));
}

TEST(Checkpoint, EditedShapeIsRejected) {
  const auto model = build_model(small_arch(), 1);
  const auto bytes = checkpoint_to_bytes(model.parameters(), model.config());
  const auto edited = edit_manifest(bytes, [](nlohmann::json& j) {
    for (auto& p : j["parameters"])
      if (p["name"] == "encoder.block0.conv.weight") p["shape"] = {8, 3, 3, 2};
  });
  std::string msg;
  EXPECT_EQ(kind_of(edited, &msg), Kind::ShapeMismatch);
  EXPECT_NE(msg.find("shape mismatch"), std::string::npos);
  EXPECT_NE(msg.find("encoder.block0.conv.weight"), std::string::npos);

  const auto dropped = edit_manifest(bytes, [](nlohmann::json& j) { j["parameters"].erase(0); });
  EXPECT_EQ(kind_of(dropped), Kind::ShapeMismatch);
}

TEST(Checkpoint, VersionTruncationAndMalformedManifest) {
  const auto model = build_model(small_arch(), 1);
  const auto bytes = checkpoint_to_bytes(model.parameters(), model.config());
  std::string msg;
  EXPECT_EQ(kind_of(edit_manifest(bytes, [](nlohmann::json& j) { j["format_version"] = 99; }), &msg),
            Kind::VersionMismatch);
  EXPECT_NE(msg.find("version mismatch"), std::string::npos);
  EXPECT_EQ(kind_of(std::span(bytes).first(bytes.size() / 2)), Kind::Truncated);
  EXPECT_EQ(kind_of(edit_manifest(bytes, [](nlohmann::json& j) { j.erase("architecture"); })), Kind::Malformed);

  auto entries = zip::read_archive(bytes);
  const std::string junk = "{not json";
  const auto bad = zip::write_archive(
      {{"manifest.json", zip::Bytes(junk.begin(), junk.end())}, {"tensors.bin", entries.at("tensors.bin")}});
  EXPECT_EQ(kind_of(bad), Kind::Malformed);

  auto short_tensors = entries.at("tensors.bin");
  short_tensors.resize(short_tensors.size() - 8);
  const auto trunc = zip::write_archive({{"manifest.json", entries.at("manifest.json")}, {"tensors.bin", short_tensors}});
  EXPECT_EQ(kind_of(trunc), Kind::Truncated);

  const std::vector<std::uint8_t> not_zip = {'h', 'e', 'l', 'l', 'o'};
  EXPECT_THROW(checkpoint_from_bytes(not_zip), CheckpointError);
}

TEST(Checkpoint, MissingFileAndWrongInputResolution) {
  TempDir dir;
  try {
    load_checkpoint(dir / "absent.ckpt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("absent.ckpt"), std::string::npos);
  }
  const auto model = build_model(make_architecture({32, 32}, 8, 4), 0);
  save_checkpoint(model.parameters(), model.config(), nlohmann::json::object(), dir / "m.ckpt");
  const auto ck = load_checkpoint(dir / "m.ckpt");
  const Model<float> loaded(ck.architecture, ck.parameters);
  const std::vector<ImageTensor> big = {ImageTensor(84, 84)};
  EXPECT_THROW(encode(loaded, big), ShapeError);
}
