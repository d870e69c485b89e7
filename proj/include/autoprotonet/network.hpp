#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "autoprotonet/core.hpp"
#include "autoprotonet/image.hpp"
#include "autoprotonet/layers.hpp"
#include "autoprotonet/rng.hpp"

namespace apn {

/// Per-axis integer pair (height, width).
struct Axis2 {
  int h = 0;
  int w = 0;
  friend bool operator==(const Axis2&, const Axis2&) = default;
};

/// Encoder/decoder geometry. Build with `make_architecture`, which derives the
/// pooling paddings and decoder output paddings by shape propagation.
///
/// Every encoder block halves each spatial side (rounding down): max-pool
/// padding is 1 on even sides and 0 on odd sides, so 84 traces
/// 84->42->21->10->5 and 32 traces 32->16->8->4->2. Each decoder block doubles
/// and adds output padding where the encoder rounded down (10->21 for 84).
struct ArchitectureConfig {
  Resolution input_resolution{32, 32};
  int channels_per_block = 64;
  int num_blocks = 4;

  std::vector<Axis2> encoder_trace;           // num_blocks + 1 sizes, input first
  std::vector<Axis2> pool_padding;            // per encoder block
  std::vector<Axis2> decoder_output_padding;  // per decoder block, in decoder order
  int embedding_dim = 0;

  Axis2 embedding_spatial() const { return encoder_trace.back(); }

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

inline ArchitectureConfig make_architecture(Resolution resolution, int channels_per_block = 64,
                                            int num_blocks = 4) {
  if (channels_per_block < 1) throw InvalidArgument("channels_per_block must be positive");
  if (num_blocks < 1) throw InvalidArgument("num_blocks must be positive");
  const int min_side = 1 << num_blocks;
  if (resolution.height < min_side || resolution.width < min_side) {
    throw ShapeError("resolution " + to_string(resolution) + " cannot round-trip through " +
                     std::to_string(num_blocks) + " pooling stages; achievable resolutions have every side >= " +
                     std::to_string(min_side) + " (e.g. 32x32, 84x84)");
  }
  ArchitectureConfig cfg;
  cfg.input_resolution = resolution;
  cfg.channels_per_block = channels_per_block;
  cfg.num_blocks = num_blocks;
  Axis2 cur{resolution.height, resolution.width};
  cfg.encoder_trace.push_back(cur);
  for (int b = 0; b < num_blocks; ++b) {
    const Axis2 pad{cur.h % 2 == 0 ? 1 : 0, cur.w % 2 == 0 ? 1 : 0};
    const Axis2 next{pooled_size(cur.h, pad.h), pooled_size(cur.w, pad.w)};
    if (next.h != cur.h / 2 || next.w != cur.w / 2 || next.h < 1 || next.w < 1) {
      throw ShapeError("pooling arithmetic failed for resolution " + to_string(resolution));
    }
    cfg.pool_padding.push_back(pad);
    cfg.encoder_trace.push_back(next);
    cur = next;
  }
  for (int d = 0; d < num_blocks; ++d) {
    const Axis2 in = cfg.encoder_trace[static_cast<std::size_t>(num_blocks - d)];
    const Axis2 want = cfg.encoder_trace[static_cast<std::size_t>(num_blocks - d - 1)];
    const Axis2 op{want.h - 2 * in.h, want.w - 2 * in.w};
    if (op.h < 0 || op.h > 1 || op.w < 0 || op.w > 1) {
      throw ShapeError("decoder cannot reproduce resolution " + to_string(resolution));
    }
    cfg.decoder_output_padding.push_back(op);
  }
  cfg.embedding_dim = channels_per_block * cur.h * cur.w;
  return cfg;
}

inline nlohmann::json to_json(const ArchitectureConfig& c) {
  auto pairs = [](const std::vector<Axis2>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& p : v) a.push_back({p.h, p.w});
    return a;
  };
  return {{"input_resolution", {c.input_resolution.height, c.input_resolution.width}},
          {"channels_per_block", c.channels_per_block},
          {"num_blocks", c.num_blocks},
          {"encoder_trace", pairs(c.encoder_trace)},
          {"pool_padding", pairs(c.pool_padding)},
          {"decoder_output_padding", pairs(c.decoder_output_padding)},
          {"embedding_dim", c.embedding_dim}};
}

/// Rebuilds from the primary fields and checks that any derived fields
/// present agree with shape propagation.
inline ArchitectureConfig architecture_from_json(const nlohmann::json& j) {
  const auto res = j.at("input_resolution");
  auto cfg = make_architecture({res.at(0).get<int>(), res.at(1).get<int>()}, j.at("channels_per_block").get<int>(),
                               j.at("num_blocks").get<int>());
  if (j.contains("embedding_dim") && j["embedding_dim"].get<int>() != cfg.embedding_dim) {
    throw ShapeError("architecture embedding_dim " + std::to_string(j["embedding_dim"].get<int>()) +
                     " disagrees with derived " + std::to_string(cfg.embedding_dim));
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters

enum class ParamGroup { Encoder, Decoder };

inline std::string to_string(ParamGroup g) { return g == ParamGroup::Encoder ? "encoder" : "decoder"; }

template <class T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  ParamGroup group = ParamGroup::Encoder;
  /// Batch-norm running statistics are stored here but are not trainable.
  bool trainable = true;
  std::vector<T> values;

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }
};

/// Named parameter collection psi = [theta; phi]; the encoder entries are
/// theta and the decoder entries phi.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;

  void add(Parameter<T> p) {
    if (index_.count(p.name)) throw InvalidArgument("duplicate parameter name '" + p.name + "'");
    if (p.values.size() != p.numel()) throw ShapeError("parameter '" + p.name + "' size does not match shape");
    index_[p.name] = params_.size();
    params_.push_back(std::move(p));
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("no parameter named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Parameter<T>& at(const std::string& name) const { return params_[index_of(name)]; }
  Parameter<T>& at(const std::string& name) { return params_[index_of(name)]; }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& p : params_) n += (p.group == g) ? p.numel() : 0;
    return n;
  }

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) {
      out.add({p.name, p.shape, p.group, p.trainable, std::vector<U>(p.values.begin(), p.values.end())});
    }
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      const auto& x = a.params_[i];
      const auto& y = b.params_[i];
      if (x.name != y.name || x.shape != y.shape || x.group != y.group || x.trainable != y.trainable) return false;
      if (x.values.size() != y.values.size()) return false;
      // Bitwise comparison so that NaN payloads and signed zeros count.
      if (!std::equal(x.values.begin(), x.values.end(), y.values.begin(),
                      [](T u, T v) { return std::memcmp(&u, &v, sizeof(T)) == 0; })) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using ModelParameters = ParameterSet<float>;

/// Expected (name, shape, group, trainable) layout for a config, in storage order.
inline std::vector<Parameter<float>> parameter_layout(const ArchitectureConfig& cfg) {
  std::vector<Parameter<float>> out;
  auto add = [&](std::string name, std::vector<int> shape, ParamGroup g, bool trainable = true) {
    out.push_back({std::move(name), std::move(shape), g, trainable, {}});
  };
  const int C = cfg.channels_per_block;
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "encoder.block" + std::to_string(b) + ".";
    const int cin = b == 0 ? ImageTensor::kChannels : C;
    add(p + "conv.weight", {C, cin, 3, 3}, ParamGroup::Encoder);
    add(p + "conv.bias", {C}, ParamGroup::Encoder);
    add(p + "bn.weight", {C}, ParamGroup::Encoder);
    add(p + "bn.bias", {C}, ParamGroup::Encoder);
    add(p + "bn.running_mean", {C}, ParamGroup::Encoder, false);
    add(p + "bn.running_var", {C}, ParamGroup::Encoder, false);
  }
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "decoder.block" + std::to_string(b) + ".";
    const int cout = b == cfg.num_blocks - 1 ? ImageTensor::kChannels : C;
    add(p + "tconv.weight", {C, C, 2, 2}, ParamGroup::Decoder);
    add(p + "tconv.bias", {C}, ParamGroup::Decoder);
    add(p + "bn.weight", {C}, ParamGroup::Decoder);
    add(p + "bn.bias", {C}, ParamGroup::Decoder);
    add(p + "bn.running_mean", {C}, ParamGroup::Decoder, false);
    add(p + "bn.running_var", {C}, ParamGroup::Decoder, false);
    add(p + "conv.weight", {cout, C, 3, 3}, ParamGroup::Decoder);
    add(p + "conv.bias", {cout}, ParamGroup::Decoder);
  }
  return out;
}

/// Checks names, order and shapes against the layout implied by `cfg`.
template <class T>
void validate_parameters(const ArchitectureConfig& cfg, const ParameterSet<T>& params) {
  const auto layout = parameter_layout(cfg);
  if (layout.size() != params.size()) {
    throw ShapeError("shape mismatch: expected " + std::to_string(layout.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& want = layout[i];
    const auto& got = params[i];
    if (want.name != got.name) {
      throw ShapeError("shape mismatch: parameter " + std::to_string(i) + " is '" + got.name + "', expected '" +
                       want.name + "'");
    }
    if (want.shape != got.shape || got.values.size() != want.numel()) {
      throw ShapeError("shape mismatch for parameter '" + got.name + "'");
    }
  }
}

/// Builds seeded fan-in-scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in))
/// for conv/transpose-conv weights and biases; batch-norm scale 1, shift 0,
/// running mean 0, running variance 1. Encoder parameters are drawn first.
inline ModelParameters initialize_parameters(const ArchitectureConfig& cfg, std::uint64_t seed) {
  const auto layout = parameter_layout(cfg);
  // conv fan-in = Cin*9; each transpose-conv output cell sees exactly Cin inputs.
  std::map<std::string, int> fan_in;
  for (const auto& p : layout) {
    if (!p.name.ends_with(".weight") || p.name.find(".bn.") != std::string::npos) continue;
    const std::string stem = p.name.substr(0, p.name.size() - 6);
    const int f = p.name.find(".tconv.") != std::string::npos ? p.shape[0] : p.shape[1] * 9;
    fan_in[stem + "weight"] = f;
    fan_in[stem + "bias"] = f;
  }
  Rng rng(seed);
  ModelParameters params;
  for (auto p : layout) {
    p.values.assign(p.numel(), 0.0f);
    if (auto it = fan_in.find(p.name); it != fan_in.end()) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(it->second));
      for (auto& v : p.values) v = static_cast<float>(rng.uniform(-bound, bound));
    } else if (p.name.ends_with("bn.weight") || p.name.ends_with("running_var")) {
      std::fill(p.values.begin(), p.values.end(), 1.0f);
    }
    params.add(std::move(p));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Batch conversion helpers

template <class T>
FeatureMap<T> images_to_batch(std::span<const ImageTensor> images, Resolution expected) {
  const int n = static_cast<int>(images.size());
  FeatureMap<T> x(ImageTensor::kChannels, n, expected.height, expected.width);
  for (int i = 0; i < n; ++i) {
    const auto& img = images[static_cast<std::size_t>(i)];
    if (img.resolution() != expected) {
      throw ShapeError("image resolution " + to_string(img.resolution()) + " does not match model input " +
                       to_string(expected));
    }
    for (int c = 0; c < ImageTensor::kChannels; ++c) {
      const float* src = img.data().data() + static_cast<std::size_t>(c) * x.plane();
      T* dst = &x.data[(static_cast<std::size_t>(c) * n + i) * x.plane()];
      for (std::size_t k = 0; k < x.plane(); ++k) dst[k] = static_cast<T>(src[k]);
    }
  }
  return x;
}

template <class T>
std::vector<ImageTensor> batch_to_images(const FeatureMap<T>& x) {
  std::vector<ImageTensor> out;
  out.reserve(static_cast<std::size_t>(x.batch));
  for (int i = 0; i < x.batch; ++i) {
    std::vector<float> data(static_cast<std::size_t>(x.channels) * x.plane());
    for (int c = 0; c < x.channels; ++c) {
      const T* src = &x.data[(static_cast<std::size_t>(c) * x.batch + i) * x.plane()];
      for (std::size_t k = 0; k < x.plane(); ++k) {
        data[static_cast<std::size_t>(c) * x.plane() + k] = static_cast<float>(src[k]);
      }
    }
    out.emplace_back(x.height, x.width, std::move(data));
  }
  return out;
}

/// [C, N, h, w] -> N x (C*h*w), each row flattened channel-major.
template <class T>
MatrixRM<T> flatten_embeddings(const FeatureMap<T>& x) {
  MatrixRM<T> z(x.batch, static_cast<Eigen::Index>(x.channels) * static_cast<Eigen::Index>(x.plane()));
  for (int c = 0; c < x.channels; ++c)
    for (int n = 0; n < x.batch; ++n)
      for (std::size_t k = 0; k < x.plane(); ++k)
        z(n, static_cast<Eigen::Index>(c * x.plane() + k)) =
            x.data[(static_cast<std::size_t>(c) * x.batch + n) * x.plane() + k];
  return z;
}

template <class T>
FeatureMap<T> unflatten_embeddings(const MatrixRM<T>& z, int channels, Axis2 spatial) {
  FeatureMap<T> x(channels, static_cast<int>(z.rows()), spatial.h, spatial.w);
  for (int c = 0; c < channels; ++c)
    for (int n = 0; n < x.batch; ++n)
      for (std::size_t k = 0; k < x.plane(); ++k)
        x.data[(static_cast<std::size_t>(c) * x.batch + n) * x.plane() + k] =
            z(n, static_cast<Eigen::Index>(c * x.plane() + k));
  return x;
}

// ---------------------------------------------------------------------------
// Model

/// Encoder F (conv-4) plus decoder G bound to a parameter set.
///
/// Train-mode passes use batch statistics, update running statistics and keep
/// a tape for the matching backward call; they require exclusive access.
/// Eval-mode passes are const, process every sample independently (so results
/// do not depend on batch composition) and are safe to call concurrently.
template <class T>
class Model {
 public:
  Model(ArchitectureConfig config, ParameterSet<T> params) : config_(std::move(config)), params_(std::move(params)) {
    validate_parameters(config_, params_);
    bind();
  }

  const ArchitectureConfig& config() const { return config_; }
  const ParameterSet<T>& parameters() const { return params_; }
  ParameterSet<T>& parameters() { return params_; }
  int embedding_dim() const { return config_.embedding_dim; }

  std::vector<std::vector<T>>& gradients() { return grads_; }
  const std::vector<std::vector<T>>& gradients() const { return grads_; }

  void zero_grad() {
    for (auto& g : grads_) std::fill(g.begin(), g.end(), T(0));
  }

  // -- train mode ----------------------------------------------------------

  MatrixRM<T> encode_train(const FeatureMap<T>& images) {
    check_input(images);
    enc_tape_.assign(enc_.size(), {});
    FeatureMap<T> x = images;
    for (std::size_t b = 0; b < enc_.size(); ++b) x = encoder_block(b, x, &enc_tape_[b]);
    return flatten_embeddings(x);
  }

  FeatureMap<T> decode_train(const MatrixRM<T>& z) {
    check_embedding(z);
    dec_tape_.assign(dec_.size(), {});
    FeatureMap<T> x = unflatten_embeddings(z, config_.channels_per_block, config_.embedding_spatial());
    for (std::size_t b = 0; b < dec_.size(); ++b) x = decoder_block(b, x, &dec_tape_[b]);
    sigmoid_inplace(x);
    dec_output_ = x;
    return x;
  }

  /// Accumulates decoder gradients for d(loss)/d(reconstruction) and returns
  /// d(loss)/d(embeddings).
  MatrixRM<T> backward_decoder(FeatureMap<T> grad) {
    if (dec_tape_.empty()) throw Error("backward_decoder called without decode_train");
    sigmoid_backward_inplace(grad, dec_output_);
    for (std::size_t b = dec_.size(); b-- > 0;) grad = decoder_block_backward(b, grad, dec_tape_[b]);
    dec_tape_.clear();
    return flatten_embeddings(grad);
  }

  /// Accumulates encoder gradients for d(loss)/d(embeddings).
  void backward_encoder(const MatrixRM<T>& dz) {
    if (enc_tape_.empty()) throw Error("backward_encoder called without encode_train");
    FeatureMap<T> grad = unflatten_embeddings(dz, config_.channels_per_block, config_.embedding_spatial());
    for (std::size_t b = enc_.size(); b-- > 0;) grad = encoder_block_backward(b, grad, enc_tape_[b]);
    enc_tape_.clear();
  }

  // -- eval mode -----------------------------------------------------------

  MatrixRM<T> encode_eval(const FeatureMap<T>& images) const {
    check_input(images);
    MatrixRM<T> out(images.batch, config_.embedding_dim);
    for (int i = 0; i < images.batch; ++i) {
      FeatureMap<T> x = slice(images, i);
      for (std::size_t b = 0; b < enc_.size(); ++b) x = encoder_block_eval(b, x);
      out.row(i) = flatten_embeddings(x).row(0);
    }
    return out;
  }

  FeatureMap<T> decode_eval(const MatrixRM<T>& z) const {
    check_embedding(z);
    const auto res = config_.input_resolution;
    FeatureMap<T> out(ImageTensor::kChannels, static_cast<int>(z.rows()), res.height, res.width);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      MatrixRM<T> row = z.row(i);
      FeatureMap<T> x = unflatten_embeddings(row, config_.channels_per_block, config_.embedding_spatial());
      for (std::size_t b = 0; b < dec_.size(); ++b) x = decoder_block_eval(b, x);
      sigmoid_inplace(x);
      for (int c = 0; c < x.channels; ++c) {
        std::copy_n(&x.data[static_cast<std::size_t>(c) * x.plane()], x.plane(),
                    &out.data[(static_cast<std::size_t>(c) * out.batch + static_cast<std::size_t>(i)) * out.plane()]);
      }
    }
    return out;
  }

 private:
  struct EncoderSlots {
    std::size_t conv_w, conv_b, bn_g, bn_b, bn_rm, bn_rv;
    int in_channels;
    Axis2 pool_pad;
  };
  struct DecoderSlots {
    std::size_t tconv_w, tconv_b, bn_g, bn_b, bn_rm, bn_rv, conv_w, conv_b;
    int out_channels;
    Axis2 out_pad;
  };
  struct EncoderTape {
    Conv3x3Cache<T> conv;
    BatchNormCache<T> bn;
    FeatureMap<T> relu_out;
    MaxPoolCache pool;
  };
  struct DecoderTape {
    TransposeConvCache<T> tconv;
    BatchNormCache<T> bn;
    FeatureMap<T> relu_out;
    Conv3x3Cache<T> conv;
  };

  void bind() {
    grads_.clear();
    for (const auto& p : params_) grads_.emplace_back(p.values.size(), T(0));
    const int C = config_.channels_per_block;
    for (int b = 0; b < config_.num_blocks; ++b) {
      const std::string p = "encoder.block" + std::to_string(b) + ".";
      enc_.push_back({params_.index_of(p + "conv.weight"), params_.index_of(p + "conv.bias"),
                      params_.index_of(p + "bn.weight"), params_.index_of(p + "bn.bias"),
                      params_.index_of(p + "bn.running_mean"), params_.index_of(p + "bn.running_var"),
                      b == 0 ? ImageTensor::kChannels : C, config_.pool_padding[static_cast<std::size_t>(b)]});
    }
    for (int b = 0; b < config_.num_blocks; ++b) {
      const std::string p = "decoder.block" + std::to_string(b) + ".";
      dec_.push_back({params_.index_of(p + "tconv.weight"), params_.index_of(p + "tconv.bias"),
                      params_.index_of(p + "bn.weight"), params_.index_of(p + "bn.bias"),
                      params_.index_of(p + "bn.running_mean"), params_.index_of(p + "bn.running_var"),
                      params_.index_of(p + "conv.weight"), params_.index_of(p + "conv.bias"),
                      b == config_.num_blocks - 1 ? ImageTensor::kChannels : C,
                      config_.decoder_output_padding[static_cast<std::size_t>(b)]});
    }
  }

  std::span<const T> p(std::size_t i) const { return params_[i].values; }
  std::span<T> pm(std::size_t i) { return params_[i].values; }
  std::span<T> g(std::size_t i) { return grads_[i]; }

  void check_input(const FeatureMap<T>& x) const {
    const auto res = config_.input_resolution;
    if (x.channels != ImageTensor::kChannels || x.height != res.height || x.width != res.width) {
      throw ShapeError("input batch " + std::to_string(x.channels) + "x" + std::to_string(x.height) + "x" +
                       std::to_string(x.width) + " does not match model input 3x" + to_string(res));
    }
  }

  void check_embedding(const MatrixRM<T>& z) const {
    if (z.cols() != config_.embedding_dim) {
      throw ShapeError("embedding length " + std::to_string(z.cols()) + " does not match model embedding_dim " +
                       std::to_string(config_.embedding_dim));
    }
  }

  static FeatureMap<T> slice(const FeatureMap<T>& x, int i) {
    FeatureMap<T> out(x.channels, 1, x.height, x.width);
    for (int c = 0; c < x.channels; ++c) {
      std::copy_n(&x.data[(static_cast<std::size_t>(c) * x.batch + i) * x.plane()], x.plane(),
                  &out.data[static_cast<std::size_t>(c) * x.plane()]);
    }
    return out;
  }

  FeatureMap<T> encoder_block(std::size_t b, const FeatureMap<T>& x, EncoderTape* tape) {
    const auto& s = enc_[b];
    const int C = config_.channels_per_block;
    auto y = conv3x3_forward<T>(x, p(s.conv_w), p(s.conv_b), C, &tape->conv);
    y = batchnorm_forward_train<T>(y, p(s.bn_g), p(s.bn_b), pm(s.bn_rm), pm(s.bn_rv), &tape->bn);
    relu_inplace(y);
    tape->relu_out = y;
    return maxpool3x3s2_forward(y, s.pool_pad.h, s.pool_pad.w, &tape->pool);
  }

  FeatureMap<T> encoder_block_backward(std::size_t b, const FeatureMap<T>& dy, const EncoderTape& tape) {
    const auto& s = enc_[b];
    auto d = maxpool_backward(dy, tape.pool);
    relu_backward_inplace(d, tape.relu_out);
    d = batchnorm_backward<T>(d, tape.bn, p(s.bn_g), g(s.bn_g), g(s.bn_b));
    return conv3x3_backward<T>(d, tape.conv, s.in_channels, p(s.conv_w), g(s.conv_w), g(s.conv_b));
  }

  FeatureMap<T> encoder_block_eval(std::size_t b, const FeatureMap<T>& x) const {
    const auto& s = enc_[b];
    auto y = conv3x3_forward<T>(x, p(s.conv_w), p(s.conv_b), config_.channels_per_block, nullptr);
    y = batchnorm_forward_eval<T>(y, p(s.bn_g), p(s.bn_b), p(s.bn_rm), p(s.bn_rv));
    relu_inplace(y);
    return maxpool3x3s2_forward(y, s.pool_pad.h, s.pool_pad.w, nullptr);
  }

  FeatureMap<T> decoder_block(std::size_t b, const FeatureMap<T>& x, DecoderTape* tape) {
    const auto& s = dec_[b];
    const int C = config_.channels_per_block;
    auto y = tconv2x2s2_forward<T>(x, p(s.tconv_w), p(s.tconv_b), C, s.out_pad.h, s.out_pad.w, &tape->tconv);
    y = batchnorm_forward_train<T>(y, p(s.bn_g), p(s.bn_b), pm(s.bn_rm), pm(s.bn_rv), &tape->bn);
    relu_inplace(y);
    tape->relu_out = y;
    return conv3x3_forward<T>(y, p(s.conv_w), p(s.conv_b), s.out_channels, &tape->conv);
  }

  FeatureMap<T> decoder_block_backward(std::size_t b, const FeatureMap<T>& dy, const DecoderTape& tape) {
    const auto& s = dec_[b];
    auto d = conv3x3_backward<T>(dy, tape.conv, config_.channels_per_block, p(s.conv_w), g(s.conv_w), g(s.conv_b));
    relu_backward_inplace(d, tape.relu_out);
    d = batchnorm_backward<T>(d, tape.bn, p(s.bn_g), g(s.bn_g), g(s.bn_b));
    return tconv2x2s2_backward<T>(d, tape.tconv, p(s.tconv_w), g(s.tconv_w), g(s.tconv_b));
  }

  FeatureMap<T> decoder_block_eval(std::size_t b, const FeatureMap<T>& x) const {
    const auto& s = dec_[b];
    const int C = config_.channels_per_block;
    auto y = tconv2x2s2_forward<T>(x, p(s.tconv_w), p(s.tconv_b), C, s.out_pad.h, s.out_pad.w, nullptr);
    y = batchnorm_forward_eval<T>(y, p(s.bn_g), p(s.bn_b), p(s.bn_rm), p(s.bn_rv));
    relu_inplace(y);
    return conv3x3_forward<T>(y, p(s.conv_w), p(s.conv_b), s.out_channels, nullptr);
  }

  ArchitectureConfig config_;
  ParameterSet<T> params_;
  std::vector<std::vector<T>> grads_;
  std::vector<EncoderSlots> enc_;
  std::vector<DecoderSlots> dec_;
  std::vector<EncoderTape> enc_tape_;
  std::vector<DecoderTape> dec_tape_;
  FeatureMap<T> dec_output_;
};

using EmbeddingMatrix = MatrixRM<float>;

/// Builds a freshly initialised float model.
inline Model<float> build_model(const ArchitectureConfig& config, std::uint64_t seed) {
  return Model<float>(config, initialize_parameters(config, seed));
}

/// Embeds images, one row per image.
inline EmbeddingMatrix encode(const Model<float>& model, std::span<const ImageTensor> images) {
  return model.encode_eval(images_to_batch<float>(images, model.config().input_resolution));
}

inline EmbeddingMatrix encode(Model<float>& model, std::span<const ImageTensor> images, Mode mode) {
  auto batch = images_to_batch<float>(images, model.config().input_resolution);
  return mode == Mode::Eval ? model.encode_eval(batch) : model.encode_train(batch);
}

/// Decodes embedding rows into images in [0,1].
inline std::vector<ImageTensor> decode(const Model<float>& model, const EmbeddingMatrix& embeddings) {
  return batch_to_images(model.decode_eval(embeddings));
}

inline std::vector<ImageTensor> decode(Model<float>& model, const EmbeddingMatrix& embeddings, Mode mode) {
  return batch_to_images(mode == Mode::Eval ? model.decode_eval(embeddings) : model.decode_train(embeddings));
}

}  // namespace apn
