#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "autoprotonet/codec.hpp"
#include "autoprotonet/core.hpp"

namespace apn {

/// RGB image stored planar (channel, row, column) with values in [0, 1].
class ImageTensor {
 public:
  static constexpr int kChannels = 3;

  ImageTensor() = default;

  ImageTensor(int height, int width)
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(kChannels) * height * width, 0.0f) {
    if (height <= 0 || width <= 0) throw InvalidArgument("image dimensions must be positive");
  }

  ImageTensor(int height, int width, std::vector<float> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (height <= 0 || width <= 0) throw InvalidArgument("image dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(kChannels) * height * width) {
      throw InvalidArgument("image buffer has " + std::to_string(data_.size()) +
                            " values, expected 3x" + std::to_string(height) + "x" +
                            std::to_string(width));
    }
    for (float v : data_) {
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
        throw InvalidArgument("image values must be finite and within [0,1]");
      }
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  Resolution resolution() const { return {height_, width_}; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  /// SHA-256 over the raw float32 contents.
  std::string content_hash() const { return hash_floats(data_); }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

namespace detail {

inline ImageTensor from_bgr_float(const cv::Mat& bgr) {
  ImageTensor img(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3f>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = std::clamp(row[x][2 - c], 0.0f, 1.0f);
      }
    }
  }
  return img;
}

inline cv::Mat to_bgr8(const ImageTensor& img) {
  cv::Mat out(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = out.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        row[x][2 - c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return out;
}

inline ImageTensor from_decoded(const cv::Mat& decoded, std::optional<Resolution> target) {
  cv::Mat f;
  decoded.convertTo(f, CV_32FC3, 1.0 / 255.0);
  if (target && (f.rows != target->height || f.cols != target->width)) {
    cv::Mat resized;
    cv::resize(f, resized, cv::Size(target->width, target->height), 0, 0, cv::INTER_LINEAR);
    f = resized;
  }
  return from_bgr_float(f);
}

}  // namespace detail

/// Decodes PNG/JPEG bytes. With `target`, the image is bilinearly resized.
inline ImageTensor decode_image(std::span<const std::uint8_t> bytes,
                                std::optional<Resolution> target = std::nullopt) {
  if (bytes.empty()) throw IoError("empty image payload");
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat decoded = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (decoded.empty()) throw IoError("image payload could not be decoded");
  return detail::from_decoded(decoded, target);
}

inline ImageTensor read_image(const std::filesystem::path& path,
                              std::optional<Resolution> target = std::nullopt) {
  cv::Mat decoded = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (decoded.empty()) throw IoError("cannot read image '" + path.string() + "'");
  return detail::from_decoded(decoded, target);
}

/// Encodes as an 8-bit RGB PNG (lossless for values that are multiples of 1/255).
inline std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", detail::to_bgr8(img), out)) throw IoError("PNG encoding failed");
  return out;
}

inline void write_png(const ImageTensor& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Rounds every value to the nearest multiple of 1/255, i.e. what survives a
/// PNG round trip.
inline ImageTensor quantize_8bit(const ImageTensor& img) {
  return decode_image(encode_png(img));
}

/// Tiles images into a grid with a 2-pixel separator; all tiles must share a
/// resolution. Used for prototype panels.
inline ImageTensor make_grid(std::span<const ImageTensor> tiles, int columns, int scale = 1) {
  if (tiles.empty()) throw InvalidArgument("make_grid needs at least one tile");
  if (columns <= 0 || scale <= 0) throw InvalidArgument("columns and scale must be positive");
  const int th = tiles[0].height() * scale;
  const int tw = tiles[0].width() * scale;
  const int rows = (static_cast<int>(tiles.size()) + columns - 1) / columns;
  const int cols = std::min<int>(columns, static_cast<int>(tiles.size()));
  constexpr int kGap = 2;
  ImageTensor grid(rows * th + (rows + 1) * kGap, cols * tw + (cols + 1) * kGap);
  std::fill(grid.data().begin(), grid.data().end(), 1.0f);
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const auto& tile = tiles[t];
    if (tile.resolution() != tiles[0].resolution()) throw InvalidArgument("grid tiles differ in size");
    const int oy = kGap + static_cast<int>(t / columns) * (th + kGap);
    const int ox = kGap + static_cast<int>(t % columns) * (tw + kGap);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x) grid.at(c, oy + y, ox + x) = tile.at(c, y / scale, x / scale);
  }
  return grid;
}

}  // namespace apn
