#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "support.hpp"

using namespace apn;
using namespace testing_support;

namespace {

struct Harness {
  TempDir dir{"apn-svc"};
  std::unique_ptr<Service> service;
  Model<float> model = build_model(small_arch(), 21);
  int port = 0;

  explicit Harness(int max_sessions = 16, std::vector<std::string> cors = {}) { boot(max_sessions, cors); }

  void boot(int max_sessions = 16, std::vector<std::string> cors = {}) {
    ServiceConfig c;
    c.port = 0;
    c.model_dir = dir / "models";
    c.session_dir = dir / "sessions";
    c.max_sessions = max_sessions;
    c.cors_allowlist = std::move(cors);
    fs::create_directories(c.model_dir);
    save_checkpoint(model.parameters(), model.config(), {{"note", "test"}}, c.model_dir / "m1.ckpt");
    service = std::make_unique<Service>(c);
    port = service->start();
  }

  void restart() {
    service->stop();
    service.reset();
    boot();
  }

  httplib::Client client() const {
    httplib::Client cl("127.0.0.1", port);
    cl.set_read_timeout(120, 0);
    return cl;
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& body, int expect = 200) const {
    auto cl = client();
    auto r = cl.Post(path, body.dump(), "application/json");
    EXPECT_TRUE(r) << path;
    if (!r) return {};
    EXPECT_EQ(r->status, expect) << path << ": " << r->body;
    return nlohmann::json::parse(r->body);
  }

  nlohmann::json get(const std::string& path, int expect = 200) const {
    auto cl = client();
    auto r = cl.Get(path);
    EXPECT_TRUE(r) << path;
    if (!r) return {};
    EXPECT_EQ(r->status, expect) << path << ": " << r->body;
    return nlohmann::json::parse(r->body);
  }
};

std::vector<LabeledImage> quantized_support(std::uint64_t seed, int way = 3, int shot = 1) {
  const auto ds = generate_synthetic_dataset(way, shot + 2, {16, 16}, seed);
  std::vector<LabeledImage> out;
  for (int k = 0; k < way; ++k)
    for (int s = 0; s < shot; ++s) out.push_back({quantize_8bit(ds.classes[k].images[s]), k});
  return out;
}

nlohmann::json create_body(const std::vector<LabeledImage>& support) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& s : support) items.push_back({{"label", s.label}, {"image", wire::encode_image(s.image)}});
  return {{"model_id", "m1"}, {"support", items}};
}

ImageTensor image_from_wire(const nlohmann::json& j) { return decode_image(base64_decode(j.get<std::string>())); }

}  // namespace

TEST(Service, HttpFlowReproducesDirectCallsBitExactly) {
  Harness h;
  Rng rng(4);
  const auto support = quantized_support(1);
  const auto guide = random_png_image(rng, {16, 16});
  const std::vector<ImageTensor> queries = {random_png_image(rng, {16, 16}), support[1].image};

  // Direct.
  auto direct = create_session(h.model, "m1", support);
  const auto strip = interpolate(h.model, direct, 2, guide, 4);
  direct = commit_refinement(h.model, direct, 2, 1.0 / 3.0, guide);
  const auto dists = classify_images(h.model, direct, queries);

  // Over HTTP.
  const auto created = h.post("/sessions", create_body(support), 201);
  const auto id = created.at("session_id").get<std::string>();
  EXPECT_EQ(created.at("version"), 0);
  const auto interp = h.post("/sessions/" + id + "/interpolate",
                             {{"class_index", 2}, {"image", wire::encode_image(guide)}, {"steps", 4}});
  ASSERT_EQ(interp.at("frames").size(), 4u);
  for (int i = 0; i < 4; ++i) {
    const auto& f = interp["frames"][i];
    EXPECT_EQ(f.at("alpha").get<double>(), strip.alphas[i]);
    EXPECT_EQ(wire::decode_embedding(f.at("embedding").get<std::string>()), row_of(strip.embeddings, i));
    EXPECT_EQ(f.at("image_hash"), strip.frames[i].content_hash());
    EXPECT_EQ(image_from_wire(f.at("image")), quantize_8bit(strip.frames[i]));
  }
  const auto committed = h.post("/sessions/" + id + "/commit",
                                {{"class_index", 2}, {"alpha", 1.0 / 3.0}, {"image", wire::encode_image(guide)},
                                 {"version", 0}});
  EXPECT_EQ(committed.at("version"), 1);
  EXPECT_EQ(committed.at("prototype_hashes"), session_summary(direct).at("prototype_hashes"));

  nlohmann::json imgs = nlohmann::json::array();
  for (const auto& q : queries) imgs.push_back(wire::encode_image(q));
  const auto cls = h.post("/sessions/" + id + "/classify", {{"images", imgs}});
  ASSERT_EQ(cls.at("distributions").size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(cls["distributions"][i].at("probabilities").get<std::vector<double>>(), dists[i].probabilities);
    EXPECT_EQ(cls["distributions"][i].at("predicted"), dists[i].argmax());
  }

  const auto protos = h.get("/sessions/" + id + "/prototypes");
  ASSERT_EQ(protos.at("prototypes").size(), 3u);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(wire::decode_embedding(protos["prototypes"][k].at("embedding").get<std::string>()), direct.prototype(k));
  }
  const auto summary = h.get("/sessions/" + id);
  EXPECT_EQ(summary.at("history_length"), 1);

  nlohmann::json labelled = nlohmann::json::array();
  for (const auto& s : support) labelled.push_back({{"label", s.label}, {"image", wire::encode_image(s.image)}});
  const auto ev = h.post("/sessions/" + id + "/evaluate", {{"images", labelled}});
  EXPECT_EQ(ev.at("accuracy").get<double>(), evaluate_fixed_set(h.model, direct, support).accuracy);

  const auto reset = h.post("/sessions/" + id + "/reset", {{"class_index", 2}});
  EXPECT_EQ(reset.at("version"), 2);
  EXPECT_EQ(reset.at("prototype_hashes")[2], session_summary(create_session(h.model, "m1", support)).at("prototype_hashes")[2]);

  const auto models = h.get("/models");
  ASSERT_EQ(models.at("models").size(), 1u);
  EXPECT_EQ(models["models"][0].at("id"), "m1");
}

TEST(Service, MultipartUpload) {
  Harness h;
  const auto support = quantized_support(2);
  httplib::MultipartFormDataItems items;
  for (const auto& s : support) {
    const auto png = encode_png(s.image);
    items.push_back({"support:" + std::to_string(s.label), std::string(png.begin(), png.end()), "s.png", "image/png"});
  }
  items.push_back({"request", R"({"model_id": "m1", "class_names": ["x", "y", "z"]})", "", "application/json"});
  auto cl = h.client();
  auto r = cl.Post("/sessions", items);
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 201) << r->body;
  const auto created = nlohmann::json::parse(r->body);
  EXPECT_EQ(created.at("class_names"), (std::vector<std::string>{"x", "y", "z"}));
  const auto id = created.at("session_id").get<std::string>();

  const auto png = encode_png(support[0].image);
  httplib::MultipartFormDataItems q = {{"images", std::string(png.begin(), png.end()), "q.png", "image/png"}};
  auto c = cl.Post("/sessions/" + id + "/classify", q);
  ASSERT_TRUE(c);
  ASSERT_EQ(c->status, 200) << c->body;
  EXPECT_EQ(nlohmann::json::parse(c->body)["distributions"][0].at("predicted"), 0);

  httplib::MultipartFormDataItems bad = {{"mystery", "x", "m.bin", "application/octet-stream"}};
  auto b = cl.Post("/sessions/" + id + "/classify", bad);
  ASSERT_TRUE(b);
  EXPECT_EQ(b->status, 400);
}

TEST(Service, ErrorStatuses) {
  Harness h(2);
  const auto support = quantized_support(3);
  h.get("/sessions/nope", 404);
  h.get("/sessions/nope/prototypes", 404);
  auto unknown_model = create_body(support);
  unknown_model["model_id"] = "ghost";
  h.post("/sessions", unknown_model, 404);

  const auto id = h.post("/sessions", create_body(support), 201).at("session_id").get<std::string>();
  const auto guide = wire::encode_image(support[0].image);
  h.post("/sessions/" + id + "/commit", {{"class_index", 0}, {"alpha", 1.5}, {"image", guide}}, 400);
  h.post("/sessions/" + id + "/commit", {{"class_index", 0}, {"alpha", 0.5}, {"image", "@@notbase64"}}, 400);
  h.post("/sessions/" + id + "/commit", {{"class_index", 0}, {"alpha", 0.5}, {"image", base64_encode(std::vector<std::uint8_t>{1, 2, 3})}}, 400);
  h.post("/sessions/" + id + "/commit", {{"class_index", 9}, {"alpha", 0.5}, {"image", guide}}, 400);
  h.post("/sessions/" + id + "/commit", {{"alpha", 0.5}, {"image", guide}}, 400);
  h.post("/sessions/" + id + "/interpolate", {{"class_index", 0}, {"image", guide}, {"steps", 1}}, 400);

  // Optimistic versioning.
  h.post("/sessions/" + id + "/commit", {{"class_index", 0}, {"alpha", 0.5}, {"image", guide}, {"version", 0}});
  h.post("/sessions/" + id + "/commit", {{"class_index", 0}, {"alpha", 0.5}, {"image", guide}, {"version", 0}}, 409);
  h.post("/sessions/" + id + "/reset", {{"class_index", 0}, {"version", 3}}, 409);

  auto cl = h.client();
  auto junk = cl.Post("/sessions", "{not json", "application/json");
  ASSERT_TRUE(junk);
  EXPECT_EQ(junk->status, 400);

  h.post("/sessions", create_body(support), 201);
  h.post("/sessions", create_body(support), 429);
}

TEST(Service, CorsAllowlist) {
  Harness h(4, {"http://studio.local"});
  auto cl = h.client();
  auto ok = cl.Get("/models", {{"Origin", "http://studio.local"}});
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->get_header_value("Access-Control-Allow-Origin"), "http://studio.local");
  auto other = cl.Get("/models", {{"Origin", "http://evil.example"}});
  ASSERT_TRUE(other);
  EXPECT_FALSE(other->has_header("Access-Control-Allow-Origin"));
  auto pre = cl.Options("/sessions", {{"Origin", "http://studio.local"}});
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_TRUE(pre->has_header("Access-Control-Allow-Methods"));
}

TEST(Service, ParallelSessionsDoNotInterfere) {
  Harness h(32);
  constexpr int kSessions = 8;
  std::vector<std::vector<LabeledImage>> supports;
  std::vector<ImageTensor> guides;
  Rng rng(9);
  for (int i = 0; i < kSessions; ++i) {
    supports.push_back(quantized_support(100 + i));
    guides.push_back(random_png_image(rng, {16, 16}));
  }
  std::vector<std::string> failures(kSessions);
  std::vector<std::thread> threads;
  for (int i = 0; i < kSessions; ++i) {
    threads.emplace_back([&, i] {
      auto direct = create_session(h.model, "m1", supports[i]);
      auto cl = h.client();
      auto r = cl.Post("/sessions", create_body(supports[i]).dump(), "application/json");
      if (!r || r->status != 201) {
        failures[i] = "create failed";
        return;
      }
      const auto id = nlohmann::json::parse(r->body).at("session_id").get<std::string>();
      for (int step = 0; step < 4; ++step) {
        const double alpha = 0.2 * (step + 1);
        const int k = step % 3;
        direct = commit_refinement(h.model, direct, k, alpha, guides[i]);
        const nlohmann::json body = {{"class_index", k}, {"alpha", alpha}, {"image", wire::encode_image(guides[i])},
                                     {"version", step}};
        auto c = cl.Post("/sessions/" + id + "/commit", body.dump(), "application/json");
        if (!c || c->status != 200) {
          failures[i] = "commit failed";
          return;
        }
        auto p = cl.Get("/sessions/" + id + "/prototypes");
        if (!p || p->status != 200) {
          failures[i] = "prototypes failed";
          return;
        }
        const auto j = nlohmann::json::parse(p->body);
        for (int q = 0; q < 3; ++q) {
          if (wire::decode_embedding(j["prototypes"][q]["embedding"].get<std::string>()) != direct.prototype(q)) {
            failures[i] = "prototype mismatch at step " + std::to_string(step);
            return;
          }
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  for (int i = 0; i < kSessions; ++i) EXPECT_TRUE(failures[i].empty()) << "session " << i << ": " << failures[i];
  EXPECT_EQ(h.service->sessions().size(), static_cast<std::size_t>(kSessions));
}

TEST(Service, ConcurrentCommitsOnOneSessionSerialise) {
  Harness h;
  const auto support = quantized_support(5);
  const auto id = h.post("/sessions", create_body(support), 201).at("session_id").get<std::string>();
  const auto guide = wire::encode_image(support[1].image);
  std::atomic<int> ok{0}, conflict{0};
  std::vector<std::thread> threads;
  for (int i = 0; i < 6; ++i) {
    threads.emplace_back([&] {
      auto cl = h.client();
      const nlohmann::json body = {{"class_index", 0}, {"alpha", 0.5}, {"image", guide}, {"version", 0}};
      auto r = cl.Post("/sessions/" + id + "/commit", body.dump(), "application/json");
      if (r && r->status == 200) ++ok;
      if (r && r->status == 409) ++conflict;
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(ok.load(), 1);
  EXPECT_EQ(conflict.load(), 5);
  EXPECT_EQ(h.get("/sessions/" + id).at("version"), 1);
}

TEST(Service, SessionsSurviveRestart) {
  Harness h;
  const auto support = quantized_support(6);
  const auto id = h.post("/sessions", create_body(support), 201).at("session_id").get<std::string>();
  h.post("/sessions/" + id + "/commit",
         {{"class_index", 1}, {"alpha", 0.4}, {"image", wire::encode_image(support[0].image)}});
  const auto before = h.get("/sessions/" + id);
  h.restart();
  const auto after = h.get("/sessions/" + id);
  EXPECT_EQ(after, before);
}

TEST(ServiceConfig, Validation) {
  TempDir dir;
  ServiceConfig c;
  c.model_dir = dir / "m";
  c.session_dir = dir / "s";
  c.max_sessions = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.max_sessions = 1;
  c.port = 70000;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.port = 0;
  std::ofstream(dir / "file") << "x";
  c.session_dir = dir / "file";
  EXPECT_THROW(c.validate(), IoError);
}
