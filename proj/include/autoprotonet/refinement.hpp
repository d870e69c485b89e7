#pragma once

// Inference-time refinement sessions: decoded prototypes, interpolation
// between a prototype and a guide embedding, and committed replacements.
//
// Sessions are values. Mutating operations return an updated copy with the
// version bumped and an event appended, so a caller can swap the whole
// session atomically.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "autoprotonet/codec.hpp"
#include "autoprotonet/core.hpp"
#include "autoprotonet/datasets.hpp"
#include "autoprotonet/evaluation.hpp"
#include "autoprotonet/image.hpp"
#include "autoprotonet/network.hpp"
#include "autoprotonet/protonet.hpp"

namespace apn {

enum class EventKind { Commit, Reset };

struct RefinementEvent {
  EventKind kind = EventKind::Commit;
  int class_index = 0;
  /// Empty for resets.
  ImageTensor guide_image;
  double alpha = 0.0;
  std::vector<float> old_prototype;
  std::vector<float> new_prototype;
  std::string timestamp;
};

struct InterpolationStrip {
  std::vector<double> alphas;
  std::vector<ImageTensor> frames;
  EmbeddingMatrix embeddings;
};

struct RefinementSession {
  std::string id;
  std::string model_id;
  std::uint64_t version = 0;
  std::string created;
  PrototypeSet prototypes;
  /// Prototypes as first computed from the support set.
  PrototypeSet initial_prototypes;
  std::vector<LabeledImage> support;
  /// Eval-mode embeddings of `support`, row i for support[i].
  EmbeddingMatrix support_embeddings;
  std::vector<RefinementEvent> history;

  int way() const { return prototypes.way(); }
  const std::vector<std::string>& class_names() const { return prototypes.class_names; }

  std::vector<float> prototype(int k) const {
    check_class(k);
    const auto row = prototypes.prototypes.row(k);
    return {row.data(), row.data() + row.size()};
  }

  void check_class(int k) const {
    if (k < 0 || k >= way()) {
      throw InvalidArgument("class_index " + std::to_string(k) + " outside [0," + std::to_string(way()) + ")");
    }
  }
};

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

inline std::string random_id() {
  std::random_device rd;
  static constexpr char kHex[] = "0123456789abcdef";
  std::string id;
  for (int i = 0; i < 4; ++i) {
    auto v = rd();
    for (int j = 0; j < 4; ++j, v >>= 4) id.push_back(kHex[v & 0xf]);
  }
  return id;
}

inline void check_resolution(const Model<float>& model, const ImageTensor& img, const std::string& what) {
  if (img.resolution() != model.config().input_resolution) {
    throw ShapeError(what + " resolution " + to_string(img.resolution()) + " does not match model input " +
                     to_string(model.config().input_resolution));
  }
}

inline std::vector<float> encode_one(const Model<float>& model, const ImageTensor& img) {
  const auto z = encode(model, std::span(&img, 1));
  return {z.data(), z.data() + z.size()};
}

/// (1 - alpha) * p + alpha * g, with the endpoints returned exactly.
inline std::vector<float> blend(std::span<const float> p, std::span<const float> g, double alpha) {
  if (alpha == 0.0) return {p.begin(), p.end()};
  if (alpha == 1.0) return {g.begin(), g.end()};
  std::vector<float> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i] = static_cast<float>((1.0 - alpha) * static_cast<double>(p[i]) + alpha * static_cast<double>(g[i]));
  }
  return out;
}

inline void set_row(EmbeddingMatrix& m, int k, std::span<const float> v) {
  for (std::size_t i = 0; i < v.size(); ++i) m(k, static_cast<Eigen::Index>(i)) = v[i];
}

}  // namespace detail

/// Builds a session from a labelled support set (labels 0..K-1, every class
/// present). `class_names` defaults to "class0".."classK-1".
inline RefinementSession create_session(const Model<float>& model, std::string model_id,
                                        std::span<const LabeledImage> support,
                                        std::vector<std::string> class_names = {}, std::string id = {},
                                        Distance distance = Distance::SquaredEuclidean) {
  if (support.empty()) throw InvalidArgument("support set is empty");
  for (const auto& s : support) detail::check_resolution(model, s.image, "support image");
  int way = static_cast<int>(class_names.size());
  if (way == 0) {
    for (const auto& s : support) way = std::max(way, s.label + 1);
  }
  std::vector<int> count(static_cast<std::size_t>(std::max(way, 0)), 0);
  for (const auto& s : support) {
    if (s.label < 0 || s.label >= way) throw InvalidArgument("support label " + std::to_string(s.label) + " outside [0," + std::to_string(way) + ")");
    ++count[static_cast<std::size_t>(s.label)];
  }
  for (int k = 0; k < way; ++k) {
    if (count[static_cast<std::size_t>(k)] == 0) {
      throw InvalidArgument("class " + std::to_string(k) + " has no support images");
    }
  }
  RefinementSession s;
  s.id = id.empty() ? detail::random_id() : std::move(id);
  s.model_id = std::move(model_id);
  s.created = detail::utc_timestamp();
  s.support.assign(support.begin(), support.end());
  s.support_embeddings = encode(model, images_of(support));
  s.prototypes = compute_prototypes(s.support_embeddings, labels_of(support), way, std::move(class_names), distance);
  s.initial_prototypes = s.prototypes;
  return s;
}

/// Decoded prototype images, one per class.
inline std::vector<ImageTensor> visualize_prototypes(const Model<float>& model, const RefinementSession& session) {
  return decode(model, session.prototypes.prototypes);
}

/// Frames along (1 - alpha) p_k + alpha encode(guide) for alpha = i / (steps - 1).
inline InterpolationStrip interpolate(const Model<float>& model, const RefinementSession& session, int class_index,
                                      const ImageTensor& guide_image, int steps) {
  session.check_class(class_index);
  if (steps < 2) throw InvalidArgument("steps must be >= 2");
  detail::check_resolution(model, guide_image, "guide image");
  const auto p = session.prototype(class_index);
  const auto g = detail::encode_one(model, guide_image);
  InterpolationStrip strip;
  strip.embeddings.resize(steps, static_cast<Eigen::Index>(p.size()));
  for (int i = 0; i < steps; ++i) {
    const double alpha = static_cast<double>(i) / static_cast<double>(steps - 1);
    strip.alphas.push_back(alpha);
    detail::set_row(strip.embeddings, i, detail::blend(p, g, alpha));
  }
  strip.frames = decode(model, strip.embeddings);
  return strip;
}

/// Replaces p_k by (1 - alpha) p_k + alpha encode(guide) and records the event.
inline RefinementSession commit_refinement(const Model<float>& model, const RefinementSession& session,
                                           int class_index, double alpha, const ImageTensor& guide_image) {
  session.check_class(class_index);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must be within [0, 1]");
  detail::check_resolution(model, guide_image, "guide image");
  RefinementEvent ev;
  ev.kind = EventKind::Commit;
  ev.class_index = class_index;
  ev.guide_image = guide_image;
  ev.alpha = alpha;
  ev.old_prototype = session.prototype(class_index);
  ev.new_prototype = detail::blend(ev.old_prototype, detail::encode_one(model, guide_image), alpha);
  ev.timestamp = detail::utc_timestamp();
  RefinementSession next = session;
  detail::set_row(next.prototypes.prototypes, class_index, ev.new_prototype);
  next.history.push_back(std::move(ev));
  ++next.version;
  return next;
}

/// Recomputes p_k from the original support embeddings of class k.
inline RefinementSession reset_class(const RefinementSession& session, int class_index) {
  session.check_class(class_index);
  RefinementEvent ev;
  ev.kind = EventKind::Reset;
  ev.class_index = class_index;
  ev.old_prototype = session.prototype(class_index);
  const auto row = session.initial_prototypes.prototypes.row(class_index);
  ev.new_prototype.assign(row.data(), row.data() + row.size());
  ev.timestamp = detail::utc_timestamp();
  RefinementSession next = session;
  detail::set_row(next.prototypes.prototypes, class_index, ev.new_prototype);
  next.history.push_back(std::move(ev));
  ++next.version;
  return next;
}

/// Re-applies `history` to the initial prototypes.
inline PrototypeSet replay_history(const Model<float>& model, const RefinementSession& session) {
  PrototypeSet p = session.initial_prototypes;
  for (const auto& ev : session.history) {
    const auto row = p.prototypes.row(ev.class_index);
    const std::vector<float> old(row.data(), row.data() + row.size());
    if (ev.kind == EventKind::Commit) {
      detail::set_row(p.prototypes, ev.class_index, detail::blend(old, detail::encode_one(model, ev.guide_image), ev.alpha));
    } else {
      const auto init = session.initial_prototypes.prototypes.row(ev.class_index);
      detail::set_row(p.prototypes, ev.class_index, std::span<const float>(init.data(), static_cast<std::size_t>(init.size())));
    }
  }
  return p;
}

inline std::vector<ClassDistribution> classify_images(const Model<float>& model, const RefinementSession& session,
                                                      std::span<const ImageTensor> images) {
  std::vector<ClassDistribution> out;
  if (images.empty()) return out;
  for (const auto& img : images) detail::check_resolution(model, img, "image");
  const auto z = encode(model, images);
  for (Eigen::Index i = 0; i < z.rows(); ++i) out.push_back(classify(session.prototypes, z, i));
  return out;
}

inline FixedSetReport evaluate_fixed_set(const Model<float>& model, const RefinementSession& session,
                                         std::span<const LabeledImage> images) {
  for (const auto& it : images) detail::check_resolution(model, it.image, "image");
  return evaluate_fixed_set(model, session.prototypes, images);
}

/// Hash of the float32 bits of prototype k (or of all prototypes for k < 0).
inline std::string prototype_hash(const RefinementSession& session, int k = -1) {
  if (k < 0) {
    const auto& m = session.prototypes.prototypes;
    return hash_floats(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
  }
  return hash_floats(session.prototype(k));
}

inline nlohmann::json session_summary(const RefinementSession& s) {
  auto hashes = nlohmann::json::array();
  for (int k = 0; k < s.way(); ++k) hashes.push_back(prototype_hash(s, k));
  return {{"session_id", s.id},
          {"model_id", s.model_id},
          {"version", s.version},
          {"created", s.created},
          {"way", s.way()},
          {"embedding_dim", s.prototypes.dim()},
          {"class_names", s.class_names()},
          {"distance", to_string(s.prototypes.distance)},
          {"prototype_hashes", hashes},
          {"history_length", s.history.size()}};
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/session.json, raw float32 arrays, and PNG copies of
// support and guide images for audit.

namespace detail {

inline void append_matrix(std::vector<std::uint8_t>& out, const EmbeddingMatrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) append_f32_le(out, m.data()[i]);
}

inline EmbeddingMatrix matrix_from(std::span<const float> v, std::size_t& at, Eigen::Index rows, Eigen::Index cols) {
  const auto n = static_cast<std::size_t>(rows * cols);
  if (at + n > v.size()) throw IoError("session embeddings file is truncated");
  EmbeddingMatrix m(rows, cols);
  std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(at), n, m.data());
  at += n;
  return m;
}

inline std::vector<float> vector_from(std::span<const float> v, std::size_t& at, std::size_t n) {
  if (at + n > v.size()) throw IoError("session embeddings file is truncated");
  std::vector<float> out(v.begin() + static_cast<std::ptrdiff_t>(at), v.begin() + static_cast<std::ptrdiff_t>(at + n));
  at += n;
  return out;
}

}  // namespace detail

/// Writes the session under `dir` (created if needed). session.json is
/// replaced last and atomically.
inline void save_session(const RefinementSession& s, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "support");
  fs::create_directories(dir / "guides");
  const Eigen::Index M = s.prototypes.prototypes.cols();

  // embeddings.bin: current, initial, support embeddings, then per event old/new.
  std::vector<std::uint8_t> emb;
  detail::append_matrix(emb, s.prototypes.prototypes);
  detail::append_matrix(emb, s.initial_prototypes.prototypes);
  detail::append_matrix(emb, s.support_embeddings);
  for (const auto& ev : s.history) {
    for (float v : ev.old_prototype) append_f32_le(emb, v);
    for (float v : ev.new_prototype) append_f32_le(emb, v);
  }
  // images.bin: exact float copies of support then guide images.
  std::vector<std::uint8_t> imgs;
  auto support = nlohmann::json::array();
  for (std::size_t i = 0; i < s.support.size(); ++i) {
    const std::string file = "support/" + std::to_string(i) + ".png";
    write_png(s.support[i].image, dir / file);
    for (float v : s.support[i].image.data()) append_f32_le(imgs, v);
    support.push_back({{"label", s.support[i].label}, {"png", file}});
  }
  auto history = nlohmann::json::array();
  for (std::size_t i = 0; i < s.history.size(); ++i) {
    const auto& ev = s.history[i];
    nlohmann::json e = {{"kind", ev.kind == EventKind::Commit ? "commit" : "reset"},
                        {"class_index", ev.class_index},
                        {"alpha", ev.alpha},
                        {"timestamp", ev.timestamp},
                        {"old_prototype_hash", hash_floats(ev.old_prototype)},
                        {"new_prototype_hash", hash_floats(ev.new_prototype)}};
    if (ev.kind == EventKind::Commit) {
      const std::string file = "guides/" + std::to_string(i) + ".png";
      write_png(ev.guide_image, dir / file);
      for (float v : ev.guide_image.data()) append_f32_le(imgs, v);
      e["guide_png"] = file;
      e["guide_resolution"] = {ev.guide_image.height(), ev.guide_image.width()};
    }
    history.push_back(std::move(e));
  }
  const auto res = s.support.front().image.resolution();
  const nlohmann::json meta = {{"id", s.id},
                               {"model_id", s.model_id},
                               {"version", s.version},
                               {"created", s.created},
                               {"class_names", s.class_names()},
                               {"distance", to_string(s.prototypes.distance)},
                               {"embedding_dim", M},
                               {"resolution", {res.height, res.width}},
                               {"support", support},
                               {"history", history},
                               {"embeddings_file", "embeddings.bin"},
                               {"images_file", "images.bin"}};
  write_file_atomic(dir / "embeddings.bin", emb);
  write_file_atomic(dir / "images.bin", imgs);
  write_file_atomic(dir / "session.json", meta.dump(2));
}

inline RefinementSession load_session(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text_file(dir / "session.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed session.json in '" + dir.string() + "': " + e.what());
  }
  try {
    RefinementSession s;
    s.id = meta.at("id").get<std::string>();
    s.model_id = meta.at("model_id").get<std::string>();
    s.version = meta.at("version").get<std::uint64_t>();
    s.created = meta.at("created").get<std::string>();
    auto names = meta.at("class_names").get<std::vector<std::string>>();
    const auto distance = distance_from_string(meta.at("distance").get<std::string>());
    const auto M = meta.at("embedding_dim").get<Eigen::Index>();
    const Resolution res{meta.at("resolution").at(0).get<int>(), meta.at("resolution").at(1).get<int>()};
    const auto K = static_cast<Eigen::Index>(names.size());
    const auto emb = unpack_f32_le(read_file_bytes(dir / meta.value("embeddings_file", "embeddings.bin")));
    const auto imgs = unpack_f32_le(read_file_bytes(dir / meta.value("images_file", "images.bin")));
    std::size_t at = 0, img_at = 0;
    s.prototypes = {detail::matrix_from(emb, at, K, M), names, distance};
    s.initial_prototypes = {detail::matrix_from(emb, at, K, M), names, distance};
    const auto& support = meta.at("support");
    s.support_embeddings = detail::matrix_from(emb, at, static_cast<Eigen::Index>(support.size()), M);
    const std::size_t npix = static_cast<std::size_t>(3) * res.height * res.width;
    for (const auto& item : support) {
      s.support.push_back({ImageTensor(res.height, res.width, detail::vector_from(imgs, img_at, npix)),
                           item.at("label").get<int>()});
    }
    for (const auto& e : meta.at("history")) {
      RefinementEvent ev;
      ev.kind = e.at("kind").get<std::string>() == "commit" ? EventKind::Commit : EventKind::Reset;
      ev.class_index = e.at("class_index").get<int>();
      ev.alpha = e.at("alpha").get<double>();
      ev.timestamp = e.at("timestamp").get<std::string>();
      ev.old_prototype = detail::vector_from(emb, at, static_cast<std::size_t>(M));
      ev.new_prototype = detail::vector_from(emb, at, static_cast<std::size_t>(M));
      if (ev.kind == EventKind::Commit) {
        const int gh = e.at("guide_resolution").at(0).get<int>(), gw = e.at("guide_resolution").at(1).get<int>();
        ev.guide_image = ImageTensor(gh, gw, detail::vector_from(imgs, img_at, static_cast<std::size_t>(3) * gh * gw));
      }
      s.history.push_back(std::move(ev));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed session.json in '" + dir.string() + "': " + e.what());
  }
}

}  // namespace apn
