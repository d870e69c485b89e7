#pragma once

// Checkpoint = store-only zip with
//   manifest.json  format version, architecture, parameter table, metadata
//   tensors.bin    raw little-endian float32 arrays in manifest order

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "autoprotonet/codec.hpp"
#include "autoprotonet/core.hpp"
#include "autoprotonet/network.hpp"
#include "autoprotonet/zip.hpp"

namespace apn {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public IoError {
 public:
  enum class Kind { VersionMismatch, ShapeMismatch, Truncated, Malformed };

  CheckpointError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  ArchitectureConfig architecture;
  ModelParameters parameters;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace detail

inline std::vector<std::uint8_t> checkpoint_to_bytes(const ModelParameters& params, const ArchitectureConfig& config,
                                                     const nlohmann::json& metadata = nlohmann::json::object()) {
  validate_parameters(config, params);
  if (!metadata.is_object()) throw InvalidArgument("checkpoint metadata must be a JSON object");
  std::vector<std::uint8_t> tensors;
  auto table = nlohmann::json::array();
  for (const auto& p : params) {
    const std::size_t offset = tensors.size();
    for (float v : p.values) append_f32_le(tensors, v);
    table.push_back({{"name", p.name},
                     {"shape", p.shape},
                     {"dtype", "float32"},
                     {"offset", offset},
                     {"length", tensors.size() - offset},
                     {"group", to_string(p.group)},
                     {"trainable", p.trainable}});
  }
  const nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion},
                                   {"architecture", to_json(config)},
                                   {"parameters", table},
                                   {"metadata", metadata}};
  const std::string text = manifest.dump(2);
  return zip::write_archive({{"manifest.json", std::vector<std::uint8_t>(text.begin(), text.end())},
                             {"tensors.bin", std::move(tensors)}});
}

inline Checkpoint checkpoint_from_bytes(std::span<const std::uint8_t> bytes) {
  using K = CheckpointError::Kind;
  std::map<std::string, zip::Bytes> entries;
  try {
    entries = zip::read_archive(bytes);
  } catch (const zip::ZipError& e) {
    throw CheckpointError(e.kind == zip::ZipError::Kind::Truncated ? K::Truncated : K::Malformed, e.what());
  }
  if (!entries.count("manifest.json")) throw CheckpointError(K::Malformed, "checkpoint has no manifest.json");
  if (!entries.count("tensors.bin")) throw CheckpointError(K::Malformed, "checkpoint has no tensors.bin");
  const auto& raw = entries["manifest.json"];
  const auto manifest = nlohmann::json::parse(raw.begin(), raw.end(), nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw CheckpointError(K::Malformed, "manifest.json is not a JSON object");
  }

  Checkpoint ck;
  std::vector<nlohmann::json> table;
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw CheckpointError(K::VersionMismatch, "version mismatch: checkpoint format " + std::to_string(version) +
                                                    ", this build reads " +
                                                    std::to_string(kCheckpointFormatVersion));
    }
    try {
      ck.architecture = architecture_from_json(manifest.at("architecture"));
    } catch (const ShapeError& e) {
      throw CheckpointError(K::ShapeMismatch, std::string("shape mismatch: ") + e.what());
    } catch (const InvalidArgument& e) {
      throw CheckpointError(K::Malformed, std::string("bad architecture: ") + e.what());
    }
    ck.metadata = manifest.value("metadata", nlohmann::json::object());
    for (const auto& e : manifest.at("parameters")) table.push_back(e);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(K::Malformed, std::string("malformed manifest: ") + e.what());
  }

  const auto& tensors = entries["tensors.bin"];
  const auto layout = parameter_layout(ck.architecture);
  if (table.size() != layout.size()) {
    throw CheckpointError(K::ShapeMismatch, "shape mismatch: manifest lists " + std::to_string(table.size()) +
                                                " parameters, architecture needs " + std::to_string(layout.size()));
  }
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& e : table) {
    if (!e.is_object() || !e.contains("name")) throw CheckpointError(K::Malformed, "parameter entry without a name");
    by_name[e["name"].get<std::string>()] = &e;
  }
  for (auto p : layout) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError(K::ShapeMismatch, "shape mismatch: missing parameter '" + p.name + "'");
    const auto& e = *it->second;
    std::vector<int> shape;
    std::size_t offset = 0, length = 0;
    try {
      shape = e.at("shape").get<std::vector<int>>();
      offset = e.at("offset").get<std::size_t>();
      length = e.at("length").get<std::size_t>();
      if (e.value("dtype", std::string("float32")) != "float32") {
        throw CheckpointError(K::Malformed, "unsupported dtype for '" + p.name + "'");
      }
    } catch (const nlohmann::json::exception& ex) {
      throw CheckpointError(K::Malformed, "malformed entry for '" + p.name + "': " + ex.what());
    }
    if (shape != p.shape) {
      throw CheckpointError(K::ShapeMismatch, "shape mismatch for '" + p.name + "': manifest " +
                                                  detail::shape_string(shape) + ", architecture " +
                                                  detail::shape_string(p.shape));
    }
    if (length != p.numel() * 4) {
      throw CheckpointError(K::ShapeMismatch, "shape mismatch for '" + p.name + "': byte length " +
                                                  std::to_string(length) + " does not match shape");
    }
    if (offset + length > tensors.size()) {
      throw CheckpointError(K::Truncated, "tensors.bin is truncated: '" + p.name + "' needs bytes up to " +
                                              std::to_string(offset + length) + ", have " +
                                              std::to_string(tensors.size()));
    }
    p.values = unpack_f32_le(std::span(tensors).subspan(offset, length));
    ck.parameters.add(std::move(p));
  }
  return ck;
}

inline void save_checkpoint(const ModelParameters& params, const ArchitectureConfig& config,
                            const nlohmann::json& metadata, const std::filesystem::path& path) {
  const auto bytes = checkpoint_to_bytes(params, config, metadata);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, bytes);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  return checkpoint_from_bytes(read_file_bytes(path));
}

}  // namespace apn
