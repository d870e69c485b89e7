#pragma once

// HTTP/JSON service for refinement sessions. Images travel as base64 PNG inside
// JSON bodies or as multipart file parts.
//
//   POST /sessions                     create_session
//   GET  /sessions/{id}                session summary
//   GET  /sessions/{id}/prototypes     visualize_prototypes
//   POST /sessions/{id}/interpolate    interpolate
//   POST /sessions/{id}/commit         commit_refinement (optimistic version)
//   POST /sessions/{id}/reset          reset_class (optimistic version)
//   POST /sessions/{id}/classify       classify_images
//   POST /sessions/{id}/evaluate       evaluate_fixed_set
//   GET  /models                       registry listing
//
// Errors are {"error": message} with 400 (bad input), 404 (unknown session
// or model), 409 (version conflict) or 429 (session limit).

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <regex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "autoprotonet/checkpoint.hpp"
#include "autoprotonet/codec.hpp"
#include "autoprotonet/core.hpp"
#include "autoprotonet/image.hpp"
#include "autoprotonet/network.hpp"
#include "autoprotonet/refinement.hpp"

namespace apn {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path model_dir = "models";
  std::filesystem::path session_dir = "sessions";
  int max_sessions = 256;
  std::vector<std::string> cors_allowlist;  // "*" allows any origin

  /// Creates missing directories and checks that both are writable.
  void validate() const {
    if (max_sessions < 1) throw InvalidArgument("max_sessions must be >= 1");
    if (port < 0 || port > 65535) throw InvalidArgument("port out of range");
    for (const auto& dir : {model_dir, session_dir}) {
      std::error_code ec;
      std::filesystem::create_directories(dir, ec);
      if (!std::filesystem::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
      const auto probe = dir / ".write_probe";
      try {
        write_file_atomic(probe, std::string_view("ok"));
      } catch (const IoError&) {
        throw IoError("'" + dir.string() + "' is not writable");
      }
      std::filesystem::remove(probe, ec);
    }
  }
};

class NotFound : public Error {
 public:
  using Error::Error;
};

class VersionConflict : public Error {
 public:
  using Error::Error;
};

class SessionLimit : public Error {
 public:
  using Error::Error;
};

/// Checkpoints in a directory, addressed by file stem; loaded on first use
/// and shared read-only afterwards.
class ModelRegistry {
 public:
  explicit ModelRegistry(std::filesystem::path dir) : dir_(std::move(dir)) {}

  /// Adds an in-memory model under `id` (not persisted).
  void add(const std::string& id, Model<float> model, nlohmann::json metadata = nlohmann::json::object()) {
    std::lock_guard lock(mutex_);
    loaded_[id] = {std::make_shared<const Model<float>>(std::move(model)), std::move(metadata)};
  }

  std::shared_ptr<const Model<float>> get(const std::string& id) {
    std::lock_guard lock(mutex_);
    if (auto it = loaded_.find(id); it != loaded_.end()) return it->second.model;
    const auto path = path_of(id);
    if (!path) throw NotFound("unknown model '" + id + "'");
    auto ck = load_checkpoint(*path);
    auto model = std::make_shared<const Model<float>>(std::move(ck.architecture), std::move(ck.parameters));
    loaded_[id] = {model, std::move(ck.metadata)};
    return model;
  }

  nlohmann::json listing() {
    std::lock_guard lock(mutex_);
    std::map<std::string, nlohmann::json> items;
    for (const auto& [id, e] : loaded_) {
      items[id] = {{"id", id}, {"architecture", to_json(e.model->config())}, {"metadata", e.metadata}, {"loaded", true}};
    }
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir_, ec)) {
      if (entry.path().extension() != ".ckpt") continue;
      const auto id = entry.path().stem().string();
      if (items.count(id)) {
        items[id]["file"] = entry.path().filename().string();
        continue;
      }
      nlohmann::json item = {{"id", id}, {"file", entry.path().filename().string()}, {"loaded", false}};
      try {
        const auto ck = load_checkpoint(entry.path());
        item["architecture"] = to_json(ck.architecture);
        item["metadata"] = ck.metadata;
      } catch (const Error& e) {
        item["error"] = e.what();
      }
      items[id] = std::move(item);
    }
    auto out = nlohmann::json::array();
    for (auto& [id, item] : items) out.push_back(std::move(item));
    return out;
  }

 private:
  struct Entry {
    std::shared_ptr<const Model<float>> model;
    nlohmann::json metadata;
  };

  std::optional<std::filesystem::path> path_of(const std::string& id) const {
    if (id.empty() || id.find('/') != std::string::npos || id.find("..") != std::string::npos) return std::nullopt;
    auto p = dir_ / (id + ".ckpt");
    if (std::filesystem::exists(p)) return p;
    return std::nullopt;
  }

  std::filesystem::path dir_;
  std::mutex mutex_;
  std::map<std::string, Entry> loaded_;
};

/// Sessions keyed by id. Each entry holds an immutable snapshot; readers take
/// the snapshot pointer and work on it, writers are serialised per session and
/// publish a complete new snapshot.
class SessionStore {
 public:
  SessionStore(std::filesystem::path dir, int max_sessions) : dir_(std::move(dir)), max_(max_sessions) {}

  /// Loads every session directory present on disk; returns the count.
  int recover() {
    int n = 0;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir_, ec)) {
      if (!entry.is_directory() || !std::filesystem::exists(entry.path() / "session.json")) continue;
      auto s = std::make_shared<const RefinementSession>(load_session(entry.path()));
      std::lock_guard lock(mutex_);
      auto e = std::make_shared<Entry>();
      e->current = s;
      sessions_[s->id] = std::move(e);
      ++n;
    }
    return n;
  }

  void insert(RefinementSession s) {
    auto e = std::make_shared<Entry>();
    std::lock_guard lock(mutex_);
    if (static_cast<int>(sessions_.size()) >= max_) {
      throw SessionLimit("session limit of " + std::to_string(max_) + " reached");
    }
    if (sessions_.count(s.id)) throw InvalidArgument("session id '" + s.id + "' already exists");
    save_session(s, dir_ / s.id);
    e->current = std::make_shared<const RefinementSession>(std::move(s));
    sessions_[e->current->id] = std::move(e);
  }

  std::shared_ptr<const RefinementSession> get(const std::string& id) const {
    const auto e = entry(id);
    std::lock_guard lock(e->ptr_mutex);
    return e->current;
  }

  /// Applies `fn` to the latest snapshot under the session's writer lock.
  /// `expected_version`, when given, must equal the snapshot's version.
  template <class Fn>
  std::shared_ptr<const RefinementSession> mutate(const std::string& id, std::optional<std::uint64_t> expected_version,
                                                  Fn&& fn) {
    const auto e = entry(id);
    std::lock_guard writer(e->write_mutex);
    std::shared_ptr<const RefinementSession> cur;
    {
      std::lock_guard lock(e->ptr_mutex);
      cur = e->current;
    }
    if (expected_version && *expected_version != cur->version) {
      throw VersionConflict("session '" + id + "' is at version " + std::to_string(cur->version) +
                            ", request expected " + std::to_string(*expected_version));
    }
    auto next = std::make_shared<const RefinementSession>(fn(*cur));
    save_session(*next, dir_ / id);
    std::lock_guard lock(e->ptr_mutex);
    e->current = next;
    return next;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
  }

 private:
  struct Entry {
    std::mutex write_mutex;
    mutable std::mutex ptr_mutex;
    std::shared_ptr<const RefinementSession> current;
  };

  std::shared_ptr<Entry> entry(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFound("unknown session '" + id + "'");
    return it->second;
  }

  std::filesystem::path dir_;
  int max_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

/// Wire helpers shared by the service and its clients.
namespace wire {

inline std::string encode_image(const ImageTensor& img) { return base64_encode(encode_png(img)); }

inline ImageTensor decode_image(const nlohmann::json& j, const char* what = "image") {
  if (!j.is_string()) throw InvalidArgument(std::string(what) + " must be a base64 PNG string");
  std::vector<std::uint8_t> bytes;
  try {
    bytes = base64_decode(j.get<std::string>());
  } catch (const InvalidArgument&) {
    throw InvalidArgument(std::string(what) + " is not valid base64");
  }
  try {
    return apn::decode_image(bytes);
  } catch (const IoError&) {
    throw InvalidArgument(std::string(what) + " could not be decoded as an image");
  }
}

inline std::string encode_embedding(std::span<const float> v) { return base64_encode(pack_f32_le(v)); }

inline std::vector<float> decode_embedding(const std::string& s) { return unpack_f32_le(base64_decode(s)); }

inline nlohmann::json distribution(const ClassDistribution& d, const std::vector<std::string>& names) {
  const int k = d.argmax();
  return {{"probabilities", d.probabilities}, {"predicted", k}, {"class_name", names[static_cast<std::size_t>(k)]}};
}

}  // namespace wire

class Service {
 public:
  explicit Service(ServiceConfig config)
      : config_(std::move(config)),
        models_(config_.model_dir),
        sessions_(config_.session_dir, config_.max_sessions) {
    config_.validate();
    sessions_.recover();
    routes();
  }

  ~Service() { stop(); }

  ModelRegistry& models() { return models_; }
  SessionStore& sessions() { return sessions_; }
  const ServiceConfig& config() const { return config_; }

  /// Binds and serves until stop(). Returns false if binding failed.
  bool listen() {
    if (!bind()) return false;
    return server_.listen_after_bind();
  }

  /// Binds and serves on a background thread; returns the bound port.
  int start() {
    if (!bind()) throw IoError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (server_.is_running()) server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

  // -- handlers (also callable in-process) ---------------------------------

  ApiResponse create(const nlohmann::json& req) {
    const auto model_id = req.at("model_id").get<std::string>();
    const auto model = models_.get(model_id);
    std::vector<LabeledImage> support;
    for (const auto& item : req.at("support")) {
      support.push_back({wire::decode_image(item.at("image"), "support image"), item.at("label").get<int>()});
    }
    const auto names = req.value("class_names", std::vector<std::string>{});
    const auto distance = distance_from_string(req.value("distance", std::string("squared_euclidean")));
    auto s = create_session(*model, model_id, support, names, {}, distance);
    sessions_.insert(s);
    return {201, session_summary(s)};
  }

  ApiResponse summary(const std::string& id) { return {200, session_summary(*sessions_.get(id))}; }

  ApiResponse prototypes(const std::string& id) {
    const auto s = sessions_.get(id);
    const auto model = models_.get(s->model_id);
    const auto images = visualize_prototypes(*model, *s);
    auto items = nlohmann::json::array();
    for (int k = 0; k < s->way(); ++k) {
      const auto p = s->prototype(k);
      items.push_back({{"class_index", k},
                       {"class_name", s->class_names()[static_cast<std::size_t>(k)]},
                       {"image", wire::encode_image(images[static_cast<std::size_t>(k)])},
                       {"image_hash", images[static_cast<std::size_t>(k)].content_hash()},
                       {"embedding", wire::encode_embedding(p)},
                       {"embedding_hash", hash_floats(p)}});
    }
    return {200, {{"session_id", s->id}, {"version", s->version}, {"prototypes", items}}};
  }

  ApiResponse interpolate(const std::string& id, const nlohmann::json& req) {
    const auto s = sessions_.get(id);
    const auto model = models_.get(s->model_id);
    const auto guide = wire::decode_image(req.at("image"), "guide image");
    const int steps = req.value("steps", 10);
    const auto strip = apn::interpolate(*model, *s, req.at("class_index").get<int>(), guide, steps);
    auto frames = nlohmann::json::array();
    for (std::size_t i = 0; i < strip.frames.size(); ++i) {
      const auto row = strip.embeddings.row(static_cast<Eigen::Index>(i));
      const std::span<const float> e(row.data(), static_cast<std::size_t>(row.size()));
      frames.push_back({{"alpha", strip.alphas[i]},
                        {"image", wire::encode_image(strip.frames[i])},
                        {"image_hash", strip.frames[i].content_hash()},
                        {"embedding", wire::encode_embedding(e)},
                        {"embedding_hash", hash_floats(e)}});
    }
    return {200, {{"session_id", s->id}, {"version", s->version}, {"alphas", strip.alphas}, {"frames", frames}}};
  }

  ApiResponse commit(const std::string& id, const nlohmann::json& req) {
    const auto guide = wire::decode_image(req.at("image"), "guide image");
    const int k = req.at("class_index").get<int>();
    const double alpha = req.at("alpha").get<double>();
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must be within [0, 1]");
    const auto next = sessions_.mutate(id, expected_version(req), [&](const RefinementSession& cur) {
      return commit_refinement(*models_.get(cur.model_id), cur, k, alpha, guide);
    });
    return {200, session_summary(*next)};
  }

  ApiResponse reset(const std::string& id, const nlohmann::json& req) {
    const int k = req.at("class_index").get<int>();
    const auto next = sessions_.mutate(id, expected_version(req),
                                       [&](const RefinementSession& cur) { return reset_class(cur, k); });
    return {200, session_summary(*next)};
  }

  ApiResponse classify(const std::string& id, const nlohmann::json& req) {
    const auto s = sessions_.get(id);
    const auto model = models_.get(s->model_id);
    std::vector<ImageTensor> images;
    for (const auto& img : req.at("images")) images.push_back(wire::decode_image(img));
    const auto dists = classify_images(*model, *s, images);
    auto out = nlohmann::json::array();
    for (const auto& d : dists) out.push_back(wire::distribution(d, s->class_names()));
    return {200, {{"session_id", s->id}, {"version", s->version}, {"distributions", out}}};
  }

  ApiResponse evaluate(const std::string& id, const nlohmann::json& req) {
    const auto s = sessions_.get(id);
    const auto model = models_.get(s->model_id);
    std::vector<LabeledImage> images;
    for (const auto& item : req.at("images")) {
      images.push_back({wire::decode_image(item.at("image")), item.at("label").get<int>()});
    }
    auto body = to_json(evaluate_fixed_set(*model, *s, images));
    body["session_id"] = s->id;
    body["version"] = s->version;
    return {200, body};
  }

  ApiResponse list_models() { return {200, {{"models", models_.listing()}}}; }

  /// Runs a handler and maps exceptions to status codes.
  template <class Fn>
  static ApiResponse guarded(Fn&& fn) {
    try {
      return fn();
    } catch (const NotFound& e) {
      return {404, {{"error", e.what()}}};
    } catch (const VersionConflict& e) {
      return {409, {{"error", e.what()}}};
    } catch (const SessionLimit& e) {
      return {429, {{"error", e.what()}}};
    } catch (const nlohmann::json::exception& e) {
      return {400, {{"error", std::string("malformed request: ") + e.what()}}};
    } catch (const InvalidArgument& e) {
      return {400, {{"error", e.what()}}};
    } catch (const ShapeError& e) {
      return {400, {{"error", e.what()}}};
    } catch (const Error& e) {
      return {500, {{"error", e.what()}}};
    } catch (const std::exception& e) {
      return {500, {{"error", e.what()}}};
    }
  }

 private:
  static std::optional<std::uint64_t> expected_version(const nlohmann::json& req) {
    if (!req.contains("version") || req["version"].is_null()) return std::nullopt;
    return req["version"].get<std::uint64_t>();
  }

  /// JSON body, or multipart form data where an optional "request" part holds
  /// the JSON fields and file parts supply images by name:
  ///   image             guide image
  ///   images            image to classify (repeatable)
  ///   images:<label>    labelled image to evaluate (repeatable)
  ///   support:<label>   support image (repeatable)
  static nlohmann::json parse_body(const httplib::Request& req) {
    if (req.is_multipart_form_data()) return parse_multipart(req);
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InvalidArgument("request body must be a JSON object");
    return j;
  }

  static nlohmann::json parse_multipart(const httplib::Request& req) {
    nlohmann::json j = nlohmann::json::object();
    if (auto it = req.files.find("request"); it != req.files.end()) {
      j = nlohmann::json::parse(it->second.content, nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw InvalidArgument("multipart 'request' part must be a JSON object");
    }
    auto label_of = [](const std::string& name, std::size_t prefix) {
      try {
        std::size_t used = 0;
        const int label = std::stoi(name.substr(prefix), &used);
        if (used == name.size() - prefix) return label;
      } catch (const std::exception&) {
      }
      throw InvalidArgument("bad label in multipart part '" + name + "'");
    };
    for (const auto& [name, part] : req.files) {
      if (name == "request") continue;
      const std::string b64 = base64_encode(
          std::span(reinterpret_cast<const std::uint8_t*>(part.content.data()), part.content.size()));
      if (name == "image") {
        j["image"] = b64;
      } else if (name == "images") {
        j["images"].push_back(b64);
      } else if (name.rfind("images:", 0) == 0) {
        j["images"].push_back({{"label", label_of(name, 7)}, {"image", b64}});
      } else if (name.rfind("support:", 0) == 0) {
        j["support"].push_back({{"label", label_of(name, 8)}, {"image", b64}});
      } else {
        throw InvalidArgument("unexpected multipart part '" + name + "'");
      }
    }
    return j;
  }

  void reply(const httplib::Request& req, httplib::Response& res, const ApiResponse& r) const {
    cors(req, res);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  }

  void cors(const httplib::Request& req, httplib::Response& res) const {
    if (!req.has_header("Origin")) return;
    const auto origin = req.get_header_value("Origin");
    const auto& allow = config_.cors_allowlist;
    if (std::find(allow.begin(), allow.end(), "*") != allow.end() ||
        std::find(allow.begin(), allow.end(), origin) != allow.end()) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Vary", "Origin");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    }
  }

  template <class Fn>
  auto handler(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      reply(req, res, guarded([&] { return fn(req); }));
    };
  }

  void routes() {
    server_.set_payload_max_length(64u << 20);
    server_.Options(R"(.*)", [this](const httplib::Request& req, httplib::Response& res) {
      cors(req, res);
      res.status = 204;
    });
    server_.Get("/models", handler([this](const httplib::Request&) { return list_models(); }));
    server_.Post("/sessions", handler([this](const httplib::Request& r) { return create(parse_body(r)); }));
    server_.Get(R"(/sessions/([A-Za-z0-9_-]+))",
                handler([this](const httplib::Request& r) { return summary(r.matches[1].str()); }));
    server_.Get(R"(/sessions/([A-Za-z0-9_-]+)/prototypes)",
                handler([this](const httplib::Request& r) { return prototypes(r.matches[1].str()); }));
    server_.Post(R"(/sessions/([A-Za-z0-9_-]+)/interpolate)",
                 handler([this](const httplib::Request& r) { return interpolate(r.matches[1].str(), parse_body(r)); }));
    server_.Post(R"(/sessions/([A-Za-z0-9_-]+)/commit)",
                 handler([this](const httplib::Request& r) { return commit(r.matches[1].str(), parse_body(r)); }));
    server_.Post(R"(/sessions/([A-Za-z0-9_-]+)/reset)",
                 handler([this](const httplib::Request& r) { return reset(r.matches[1].str(), parse_body(r)); }));
    server_.Post(R"(/sessions/([A-Za-z0-9_-]+)/classify)",
                 handler([this](const httplib::Request& r) { return classify(r.matches[1].str(), parse_body(r)); }));
    server_.Post(R"(/sessions/([A-Za-z0-9_-]+)/evaluate)",
                 handler([this](const httplib::Request& r) { return evaluate(r.matches[1].str(), parse_body(r)); }));
  }

  bool bind() {
    if (config_.port == 0) {
      port_ = server_.bind_to_any_port(config_.host);
      return port_ > 0;
    }
    port_ = config_.port;
    return server_.bind_to_port(config_.host, config_.port);
  }

  ServiceConfig config_;
  ModelRegistry models_;
  SessionStore sessions_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace apn
