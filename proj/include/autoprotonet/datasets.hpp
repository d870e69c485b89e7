#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autoprotonet/core.hpp"
#include "autoprotonet/image.hpp"
#include "autoprotonet/rng.hpp"

namespace apn {

struct ImageClass {
  std::string name;
  std::vector<ImageTensor> images;
};

/// Images grouped by class for one split. Immutable once built.
struct ClassDataset {
  std::vector<ImageClass> classes;
  Resolution resolution;
  Split split = Split::MetaTrain;

  std::size_t num_classes() const { return classes.size(); }
};

struct SplitDatasets {
  ClassDataset meta_train{{}, {}, Split::MetaTrain};
  ClassDataset meta_val{{}, {}, Split::MetaVal};
  ClassDataset meta_test{{}, {}, Split::MetaTest};

  const ClassDataset& get(Split s) const {
    switch (s) {
      case Split::MetaTrain: return meta_train;
      case Split::MetaVal: return meta_val;
      case Split::MetaTest: return meta_test;
    }
    throw InvalidArgument("bad split");
  }
  ClassDataset& get(Split s) { return const_cast<ClassDataset&>(std::as_const(*this).get(s)); }
};

struct EpisodeSpec {
  int way = 5;
  int shot = 1;
  int query_count = 15;
  std::optional<std::uint64_t> seed;
};

struct LabeledImage {
  ImageTensor image;
  int label = 0;
};

/// One N-way K-shot task. Labels are indices into `class_names`.
struct Episode {
  std::vector<LabeledImage> support;
  std::vector<LabeledImage> query;
  std::vector<std::string> class_names;

  int way() const { return static_cast<int>(class_names.size()); }
};

// ---------------------------------------------------------------------------
// Directory datasets

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace detail

/// Loads `root/<class_name>/<image>.{png,jpg}`. Every image is bilinearly
/// resized to `resolution`. Without a manifest every class lands in
/// meta-train; with one, classes are assigned per the manifest and classes
/// the manifest does not mention are skipped.
inline SplitDatasets load_directory_dataset(const std::filesystem::path& root, Resolution resolution,
                                            const std::optional<std::filesystem::path>& split_manifest = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root.string() + "' is not a directory");

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  if (class_dirs.empty()) throw IoError("no classes found in '" + root.string() + "'");
  std::sort(class_dirs.begin(), class_dirs.end());

  std::optional<std::map<std::string, Split>> assignment;
  if (split_manifest) {
    std::ifstream f(*split_manifest);
    if (!f) throw IoError("cannot read split manifest '" + split_manifest->string() + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("split manifest '" + split_manifest->string() + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw IoError("split manifest must be a JSON object");
    assignment.emplace();
    std::set<std::string> present;
    for (const auto& d : class_dirs) present.insert(d.filename().string());
    for (const auto& [name, value] : j.items()) {
      if (!present.count(name)) throw IoError("split manifest names missing class '" + name + "'");
      (*assignment)[name] = split_from_string(value.get<std::string>());
    }
  }

  SplitDatasets out;
  for (auto* ds : {&out.meta_train, &out.meta_val, &out.meta_test}) ds->resolution = resolution;

  for (const auto& dir : class_dirs) {
    const std::string name = dir.filename().string();
    Split split = Split::MetaTrain;
    if (assignment) {
      auto it = assignment->find(name);
      if (it == assignment->end()) continue;
      split = it->second;
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && detail::is_image_file(entry.path())) files.push_back(entry.path());
    }
    if (files.empty()) throw IoError("class '" + name + "' has no images");
    std::sort(files.begin(), files.end());
    ImageClass cls{name, {}};
    cls.images.reserve(files.size());
    for (const auto& file : files) cls.images.push_back(read_image(file, resolution));
    out.get(split).classes.push_back(std::move(cls));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
//
// Class identity = (shape, fill colour). Each image draws a random centre,
// scale in [0.75, 1.25] of the nominal radius, rotation and a jittered grey
// background, rendered with 4x supersampling.

namespace synthetic {

inline constexpr std::array<const char*, 8> kShapeNames = {
    "circle", "square", "triangle", "diamond", "cross", "ring", "star", "hexagon"};

inline constexpr std::array<const char*, 8> kColorNames = {
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"};

inline constexpr std::array<std::array<float, 3>, 8> kColors = {{
    {0.90f, 0.15f, 0.15f},
    {0.15f, 0.80f, 0.20f},
    {0.20f, 0.30f, 0.95f},
    {0.95f, 0.90f, 0.15f},
    {0.90f, 0.20f, 0.85f},
    {0.15f, 0.85f, 0.90f},
    {1.00f, 0.55f, 0.10f},
    {0.97f, 0.97f, 0.97f},
}};

inline constexpr int kMaxClasses = static_cast<int>(kShapeNames.size() * kColorNames.size());

struct ClassIdentity {
  int shape = 0;
  int color = 0;
};

/// Class c uses shape c mod S and colour (c/S + c mod S) mod C; distinct for
/// every c below S*C.
inline ClassIdentity identity_of(int class_id) {
  if (class_id < 0 || class_id >= kMaxClasses) {
    throw InvalidArgument("synthetic class id must be in [0," + std::to_string(kMaxClasses) + ")");
  }
  constexpr int S = static_cast<int>(kShapeNames.size());
  constexpr int C = static_cast<int>(kColorNames.size());
  return {class_id % S, (class_id / S + class_id % S) % C};
}

inline std::string class_name(int class_id) {
  const auto id = identity_of(class_id);
  return std::string(kColorNames[id.color]) + "_" + kShapeNames[id.shape];
}

namespace detail {

inline bool inside_polygon(double u, double v, std::span<const std::array<double, 2>> poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > v) != (b[1] > v) && u < (b[0] - a[0]) * (v - a[1]) / (b[1] - a[1]) + a[0]) inside = !inside;
  }
  return inside;
}

inline std::vector<std::array<double, 2>> regular_polygon(int n, double radius, double phase) {
  std::vector<std::array<double, 2>> pts;
  for (int i = 0; i < n; ++i) {
    const double a = phase + 2.0 * std::numbers::pi * i / n;
    pts.push_back({radius * std::cos(a), -radius * std::sin(a)});
  }
  return pts;
}

inline const std::vector<std::array<double, 2>>& star_polygon() {
  static const auto pts = [] {
    std::vector<std::array<double, 2>> p;
    for (int i = 0; i < 10; ++i) {
      const double r = (i % 2 == 0) ? 1.0 : 0.45;
      const double a = std::numbers::pi / 2 + std::numbers::pi * i / 5;
      p.push_back({r * std::cos(a), -r * std::sin(a)});
    }
    return p;
  }();
  return pts;
}

/// Shape membership in normalised coordinates (nominal radius 1).
inline bool inside_shape(int shape, double u, double v) {
  static const auto triangle = regular_polygon(3, 1.0, std::numbers::pi / 2);
  static const auto hexagon = regular_polygon(6, 1.0, 0.0);
  const double r2 = u * u + v * v;
  switch (shape) {
    case 0: return r2 <= 1.0;
    case 1: return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case 2: return inside_polygon(u, v, triangle);
    case 3: return std::abs(u) + std::abs(v) <= 1.0;
    case 4: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 5: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case 6: return inside_polygon(u, v, star_polygon());
    case 7: return inside_polygon(u, v, hexagon);
    default: return false;
  }
}

}  // namespace detail

struct RenderOptions {
  /// Fraction of the shape's bounding box hidden behind an occluder, taken
  /// from a random side. 0 disables occlusion.
  double occlusion = 0.0;
  /// Occluder colour; the image background when unset.
  std::optional<std::array<float, 3>> occluder_color;
};

/// Renders one image of `class_id`, fully determined by `seed`.
inline ImageTensor render_image(int class_id, Resolution res, std::uint64_t seed,
                                const RenderOptions& options = {}) {
  const auto id = identity_of(class_id);
  Rng rng(seed);
  const double h = res.height;
  const double w = res.width;
  const double nominal = 0.3 * std::min(h, w);
  const double radius = nominal * rng.uniform(0.75, 1.25);
  const double cx = rng.uniform(radius, w - radius);
  const double cy = rng.uniform(radius, h - radius);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double grey = rng.uniform(0.10, 0.45);
  std::array<float, 3> background{};
  for (auto& b : background) b = static_cast<float>(std::clamp(grey + rng.uniform(-0.05, 0.05), 0.0, 1.0));
  const auto& fill = kColors[id.color];

  // Occluder rectangle in pixel coordinates, covering `occlusion` of the
  // bounding box from one side.
  const int side = static_cast<int>(rng.uniform_index(4));
  double ox0 = cx - radius, ox1 = cx + radius, oy0 = cy - radius, oy1 = cy + radius;
  const double cover = 2.0 * radius * std::clamp(options.occlusion, 0.0, 1.0);
  switch (side) {
    case 0: ox1 = ox0 + cover; break;
    case 1: ox0 = ox1 - cover; break;
    case 2: oy1 = oy0 + cover; break;
    default: oy0 = oy1 - cover; break;
  }
  const auto occluder = options.occluder_color.value_or(background);

  const double ca = std::cos(angle), sa = std::sin(angle);
  ImageTensor img(res.height, res.width);
  constexpr std::array<double, 2> kOffsets = {0.25, 0.75};
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      std::array<double, 3> acc{};
      for (double sy : kOffsets) {
        for (double sx : kOffsets) {
          const double px = x + sx, py = y + sy;
          const std::array<float, 3>* colour = &background;
          if (options.occlusion > 0.0 && px >= ox0 && px <= ox1 && py >= oy0 && py <= oy1) {
            colour = &occluder;
          } else {
            const double dx = (px - cx) / radius, dy = (py - cy) / radius;
            const double u = ca * dx + sa * dy;
            const double v = -sa * dx + ca * dy;
            if (detail::inside_shape(id.shape, u, v)) colour = &fill;
          }
          for (int c = 0; c < 3; ++c) acc[c] += (*colour)[c];
        }
      }
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(acc[c] / 4.0);
    }
  }
  return img;
}

}  // namespace synthetic

/// Deterministic desk-scale dataset of procedurally rendered shapes. All
/// classes are placed in meta-train; use `split_classes` to partition.
inline ClassDataset generate_synthetic_dataset(int num_classes, int images_per_class, Resolution resolution,
                                               std::uint64_t seed) {
  if (num_classes < 2) throw InvalidArgument("synthetic dataset needs at least 2 classes");
  if (images_per_class < 2) throw InvalidArgument("synthetic dataset needs at least 2 images per class");
  if (num_classes > synthetic::kMaxClasses) {
    throw InvalidArgument("synthetic dataset supports at most " + std::to_string(synthetic::kMaxClasses) +
                          " classes");
  }
  ClassDataset ds{{}, resolution, Split::MetaTrain};
  ds.classes.reserve(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    ImageClass cls{synthetic::class_name(c), {}};
    cls.images.reserve(static_cast<std::size_t>(images_per_class));
    for (int i = 0; i < images_per_class; ++i) {
      cls.images.push_back(synthetic::render_image(
          c, resolution, derive_seed(seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)})));
    }
    ds.classes.push_back(std::move(cls));
  }
  return ds;
}

/// Partitions classes in order: the first `train` go to meta-train, the next
/// `val` to meta-val, the next `test` to meta-test.
inline SplitDatasets split_classes(ClassDataset all, int train, int val, int test) {
  if (train < 0 || val < 0 || test < 0 || static_cast<std::size_t>(train + val + test) > all.classes.size()) {
    throw InvalidArgument("split counts exceed the number of classes");
  }
  SplitDatasets out;
  for (auto* ds : {&out.meta_train, &out.meta_val, &out.meta_test}) ds->resolution = all.resolution;
  int i = 0;
  for (auto& cls : all.classes) {
    if (i < train) out.meta_train.classes.push_back(std::move(cls));
    else if (i < train + val) out.meta_val.classes.push_back(std::move(cls));
    else if (i < train + val + test) out.meta_test.classes.push_back(std::move(cls));
    ++i;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode sampling

/// Samples classes then images without replacement using `rng`. Class k of
/// the episode is the k-th class drawn; support and query are class-major.
inline Episode sample_episode(const ClassDataset& dataset, const EpisodeSpec& spec, Rng& rng) {
  if (spec.way < 1 || spec.shot < 1 || spec.query_count < 1) {
    throw InvalidArgument("way, shot and query_count must be positive");
  }
  if (static_cast<std::size_t>(spec.way) > dataset.classes.size()) {
    throw InvalidArgument("episode way " + std::to_string(spec.way) + " exceeds the " +
                          std::to_string(dataset.classes.size()) + " classes of the " +
                          to_string(dataset.split) + " split");
  }
  std::vector<std::size_t> class_order(dataset.classes.size());
  std::iota(class_order.begin(), class_order.end(), std::size_t{0});
  rng.partial_shuffle(std::span(class_order), static_cast<std::size_t>(spec.way));

  const auto per_class = static_cast<std::size_t>(spec.shot + spec.query_count);
  Episode ep;
  ep.support.reserve(static_cast<std::size_t>(spec.way * spec.shot));
  ep.query.reserve(static_cast<std::size_t>(spec.way * spec.query_count));
  for (int k = 0; k < spec.way; ++k) {
    const auto& cls = dataset.classes[class_order[static_cast<std::size_t>(k)]];
    if (cls.images.size() < per_class) {
      throw InvalidArgument("class '" + cls.name + "' has " + std::to_string(cls.images.size()) +
                            " images, episode needs " + std::to_string(per_class));
    }
    ep.class_names.push_back(cls.name);
    std::vector<std::size_t> idx(cls.images.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.partial_shuffle(std::span(idx), per_class);
    for (std::size_t i = 0; i < per_class; ++i) {
      auto& dst = i < static_cast<std::size_t>(spec.shot) ? ep.support : ep.query;
      dst.push_back({cls.images[idx[i]], k});
    }
  }
  return ep;
}

/// Seeded convenience overload; without a seed a nondeterministic one is drawn.
inline Episode sample_episode(const ClassDataset& dataset, const EpisodeSpec& spec) {
  Rng rng(spec.seed.value_or(std::random_device{}()));
  return sample_episode(dataset, spec, rng);
}

}  // namespace apn
