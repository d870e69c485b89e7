#pragma once

// Forward/backward kernels for the conv-4 encoder and transpose-conv decoder.
//
// Activations use a channel-major layout [C, N, H, W] so that every layer is a
// single GEMM over the whole batch: a 3x3 conv is W[Cout, Cin*9] x col[Cin*9,
// N*H*W], and the 2x2/stride-2 transpose conv is W^T[Cout*4, Cin] x X[Cin, N*H*W]
// followed by a scatter (the stride equals the kernel size, so taps never
// overlap). Kernels take parameter spans and write gradients into caller-owned
// spans; caches for backward live in small structs owned by the caller.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "autoprotonet/core.hpp"

namespace apn {

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatMap = Eigen::Map<MatrixRM<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const MatrixRM<T>>;

/// Channel-major batch of feature maps.
template <class T>
struct FeatureMap {
  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, int n, int h, int w, T fill = T(0))
      : channels(c), batch(n), height(h), width(w),
        data(static_cast<std::size_t>(c) * n * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  /// Columns of the [C, N*H*W] matrix view.
  std::size_t columns() const { return static_cast<std::size_t>(batch) * plane(); }

  T& at(int c, int n, int y, int x) {
    return data[((static_cast<std::size_t>(c) * batch + n) * height + y) * width + x];
  }
  T at(int c, int n, int y, int x) const {
    return data[((static_cast<std::size_t>(c) * batch + n) * height + y) * width + x];
  }

  MatMap<T> matrix() { return {data.data(), channels, static_cast<Eigen::Index>(columns())}; }
  ConstMatMap<T> matrix() const { return {data.data(), channels, static_cast<Eigen::Index>(columns())}; }
};

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, padding 1.

template <class T>
struct Conv3x3Cache {
  MatrixRM<T> col;       // im2col of the input (wide-output path)
  FeatureMap<T> input;   // raw input (narrow-output path)
};

namespace detail {

template <class T>
MatrixRM<T> im2col3x3(const FeatureMap<T>& x) {
  const int H = x.height, W = x.width;
  MatrixRM<T> col(static_cast<Eigen::Index>(x.channels) * 9, static_cast<Eigen::Index>(x.columns()));
  for (int c = 0; c < x.channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        // Output column xx reads input column xx + kx - 1; [lo, hi) is in range.
        const int lo = kx == 0 ? 1 : 0;
        const int hi = kx == 2 ? W - 1 : W;
        T* row = col.row((c * 3 + ky) * 3 + kx).data();
        for (int n = 0; n < x.batch; ++n) {
          const T* plane = &x.data[(static_cast<std::size_t>(c) * x.batch + n) * x.plane()];
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - 1;
            T* out = row + (static_cast<std::size_t>(n) * H + y) * W;
            if (sy < 0 || sy >= H) {
              std::fill(out, out + W, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(sy) * W + (kx - 1);
            if (lo > 0) out[0] = T(0);
            std::copy(src + lo, src + hi, out + lo);
            if (hi < W) out[W - 1] = T(0);
          }
        }
      }
    }
  }
  return col;
}

template <class T>
void col2im3x3(const MatrixRM<T>& col, FeatureMap<T>& dx) {
  const int H = dx.height, W = dx.width;
  for (int c = 0; c < dx.channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int lo = kx == 0 ? 1 : 0;
        const int hi = kx == 2 ? W - 1 : W;
        const T* row = col.row((c * 3 + ky) * 3 + kx).data();
        for (int n = 0; n < dx.batch; ++n) {
          T* plane = &dx.data[(static_cast<std::size_t>(c) * dx.batch + n) * dx.plane()];
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= H) continue;
            const T* in = row + (static_cast<std::size_t>(n) * H + y) * W;
            T* dst = plane + static_cast<std::size_t>(sy) * W + (kx - 1);
            for (int xx = lo; xx < hi; ++xx) dst[xx] += in[xx];
          }
        }
      }
    }
  }
}

// Narrow-output path (Cout < Cin): works on per-tap products of the
// unshifted input instead of the much larger im2col matrix.

/// out[o] = sum over taps t of shift_t(taps[o*9 + t]).
template <class T>
void gather_taps3x3(const MatrixRM<T>& taps, FeatureMap<T>& out) {
  const int H = out.height, W = out.width;
  for (int o = 0; o < out.channels; ++o) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int lo = kx == 0 ? 1 : 0;
        const int hi = kx == 2 ? W - 1 : W;
        const T* row = taps.row((o * 3 + ky) * 3 + kx).data();
        for (int n = 0; n < out.batch; ++n) {
          T* plane = &out.data[(static_cast<std::size_t>(o) * out.batch + n) * out.plane()];
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= H) continue;
            const T* src = row + (static_cast<std::size_t>(n) * H + sy) * W + (kx - 1);
            T* dst = plane + static_cast<std::size_t>(y) * W;
            for (int xx = lo; xx < hi; ++xx) dst[xx] += src[xx];
          }
        }
      }
    }
  }
}

/// Adjoint of gather_taps3x3: row o*9 + t holds dy[o] moved by tap t.
template <class T>
MatrixRM<T> scatter_taps3x3(const FeatureMap<T>& dy) {
  const int H = dy.height, W = dy.width;
  MatrixRM<T> out = MatrixRM<T>::Zero(static_cast<Eigen::Index>(dy.channels) * 9,
                                      static_cast<Eigen::Index>(dy.columns()));
  for (int o = 0; o < dy.channels; ++o) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int lo = kx == 0 ? 1 : 0;
        const int hi = kx == 2 ? W - 1 : W;
        T* row = out.row((o * 3 + ky) * 3 + kx).data();
        for (int n = 0; n < dy.batch; ++n) {
          const T* plane = &dy.data[(static_cast<std::size_t>(o) * dy.batch + n) * dy.plane()];
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= H) continue;
            const T* src = plane + static_cast<std::size_t>(y) * W;
            T* dst = row + (static_cast<std::size_t>(n) * H + sy) * W + (kx - 1);
            for (int xx = lo; xx < hi; ++xx) dst[xx] = src[xx];
          }
        }
      }
    }
  }
  return out;
}

/// [Cout, Cin, 9] -> [Cout*9, Cin].
template <class T>
MatrixRM<T> taps_major(std::span<const T> weight, int out_channels, int in_channels) {
  MatrixRM<T> w(static_cast<Eigen::Index>(out_channels) * 9, in_channels);
  for (int o = 0; o < out_channels; ++o)
    for (int c = 0; c < in_channels; ++c)
      for (int t = 0; t < 9; ++t) w(o * 9 + t, c) = weight[(static_cast<std::size_t>(o) * in_channels + c) * 9 + t];
  return w;
}

}  // namespace detail

/// weight: [Cout, Cin, 3, 3], bias: [Cout].
template <class T>
FeatureMap<T> conv3x3_forward(const FeatureMap<T>& x, std::span<const T> weight, std::span<const T> bias,
                              int out_channels, Conv3x3Cache<T>* cache) {
  FeatureMap<T> y(out_channels, x.batch, x.height, x.width);
  auto ym = y.matrix();
  if (out_channels < x.channels) {
    const MatrixRM<T> taps = detail::taps_major(weight, out_channels, x.channels) * x.matrix();
    detail::gather_taps3x3(taps, y);
    if (cache) cache->input = x;
  } else {
    MatrixRM<T> col = detail::im2col3x3(x);
    ConstMatMap<T> w(weight.data(), out_channels, static_cast<Eigen::Index>(x.channels) * 9);
    ym.noalias() = w * col;
    if (cache) cache->col = std::move(col);
  }
  for (int c = 0; c < out_channels; ++c) ym.row(c).array() += bias[static_cast<std::size_t>(c)];
  return y;
}

template <class T>
FeatureMap<T> conv3x3_backward(const FeatureMap<T>& dy, const Conv3x3Cache<T>& cache, int in_channels,
                               std::span<const T> weight, std::span<T> dweight, std::span<T> dbias) {
  const auto dym = dy.matrix();
  // Plain loop: Eigen's vectorised sum peels by pointer alignment, which would
  // make the result depend on where the allocator put `dy`.
  const std::size_t cols = dy.columns();
  for (int c = 0; c < dy.channels; ++c) {
    const T* row = &dy.data[static_cast<std::size_t>(c) * cols];
    T s = 0;
    for (std::size_t i = 0; i < cols; ++i) s += row[i];
    dbias[static_cast<std::size_t>(c)] += s;
  }
  FeatureMap<T> dx(in_channels, dy.batch, dy.height, dy.width);
  if (dy.channels < in_channels) {
    const MatrixRM<T> shifted = detail::scatter_taps3x3(dy);
    const MatrixRM<T> dw_taps = shifted * cache.input.matrix().transpose();
    for (int o = 0; o < dy.channels; ++o)
      for (int c = 0; c < in_channels; ++c)
        for (int t = 0; t < 9; ++t)
          dweight[(static_cast<std::size_t>(o) * in_channels + c) * 9 + t] += dw_taps(o * 9 + t, c);
    dx.matrix().noalias() = detail::taps_major(weight, dy.channels, in_channels).transpose() * shifted;
    return dx;
  }
  ConstMatMap<T> w(weight.data(), dy.channels, static_cast<Eigen::Index>(in_channels) * 9);
  MatMap<T> dw(dweight.data(), dy.channels, static_cast<Eigen::Index>(in_channels) * 9);
  dw.noalias() += dym * cache.col.transpose();
  MatrixRM<T> dcol = w.transpose() * dym;
  detail::col2im3x3(dcol, dx);
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalisation over (N, H, W) per channel.

template <class T>
struct BatchNormCache {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Train mode: normalises with batch statistics and updates the running
/// statistics in place (unbiased variance, momentum 0.1).
template <class T>
FeatureMap<T> batchnorm_forward_train(const FeatureMap<T>& x, std::span<const T> gamma, std::span<const T> beta,
                                      std::span<T> running_mean, std::span<T> running_var,
                                      BatchNormCache<T>* cache) {
  const std::size_t cols = x.columns();
  FeatureMap<T> y(x.channels, x.batch, x.height, x.width);
  if (cache) {
    cache->xhat.resize(x.data.size());
    cache->inv_std.resize(static_cast<std::size_t>(x.channels));
  }
  for (int c = 0; c < x.channels; ++c) {
    const T* in = &x.data[c * cols];
    T mean = 0;
    for (std::size_t i = 0; i < cols; ++i) mean += in[i];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t i = 0; i < cols; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<T>(cols);
    const T inv_std = T(1) / std::sqrt(var + static_cast<T>(kBatchNormEps));
    const T g = gamma[static_cast<std::size_t>(c)], b = beta[static_cast<std::size_t>(c)];
    T* out = &y.data[c * cols];
    for (std::size_t i = 0; i < cols; ++i) {
      const T xh = (in[i] - mean) * inv_std;
      if (cache) cache->xhat[c * cols + i] = xh;
      out[i] = g * xh + b;
    }
    if (cache) cache->inv_std[static_cast<std::size_t>(c)] = inv_std;
    const T m = static_cast<T>(kBatchNormMomentum);
    const T unbiased = cols > 1 ? var * static_cast<T>(cols) / static_cast<T>(cols - 1) : var;
    running_mean[static_cast<std::size_t>(c)] = (T(1) - m) * running_mean[static_cast<std::size_t>(c)] + m * mean;
    running_var[static_cast<std::size_t>(c)] = (T(1) - m) * running_var[static_cast<std::size_t>(c)] + m * unbiased;
  }
  return y;
}

template <class T>
FeatureMap<T> batchnorm_forward_eval(const FeatureMap<T>& x, std::span<const T> gamma, std::span<const T> beta,
                                     std::span<const T> running_mean, std::span<const T> running_var) {
  const std::size_t cols = x.columns();
  FeatureMap<T> y(x.channels, x.batch, x.height, x.width);
  for (int c = 0; c < x.channels; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const T scale = gamma[ci] / std::sqrt(running_var[ci] + static_cast<T>(kBatchNormEps));
    const T shift = beta[ci] - running_mean[ci] * scale;
    const T* in = &x.data[c * cols];
    T* out = &y.data[c * cols];
    for (std::size_t i = 0; i < cols; ++i) out[i] = in[i] * scale + shift;
  }
  return y;
}

template <class T>
FeatureMap<T> batchnorm_backward(const FeatureMap<T>& dy, const BatchNormCache<T>& cache, std::span<const T> gamma,
                                 std::span<T> dgamma, std::span<T> dbeta) {
  const std::size_t cols = dy.columns();
  FeatureMap<T> dx(dy.channels, dy.batch, dy.height, dy.width);
  for (int c = 0; c < dy.channels; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const T* g = &dy.data[c * cols];
    const T* xh = &cache.xhat[c * cols];
    T sum_g = 0, sum_gx = 0;
    for (std::size_t i = 0; i < cols; ++i) {
      sum_g += g[i];
      sum_gx += g[i] * xh[i];
    }
    dgamma[ci] += sum_gx;
    dbeta[ci] += sum_g;
    const T n = static_cast<T>(cols);
    const T k = gamma[ci] * cache.inv_std[ci] / n;
    T* out = &dx.data[c * cols];
    for (std::size_t i = 0; i < cols; ++i) out[i] = k * (n * g[i] - sum_g - xh[i] * sum_gx);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU (in place) and logistic output.

template <class T>
void relu_inplace(FeatureMap<T>& x) {
  for (auto& v : x.data) v = v > T(0) ? v : T(0);
}

/// `y` is the ReLU output; gradient passes where y > 0.
template <class T>
void relu_backward_inplace(FeatureMap<T>& dy, const FeatureMap<T>& y) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) {
    if (!(y.data[i] > T(0))) dy.data[i] = T(0);
  }
}

template <class T>
void sigmoid_inplace(FeatureMap<T>& x) {
  for (auto& v : x.data) v = T(1) / (T(1) + std::exp(-v));
}

template <class T>
void sigmoid_backward_inplace(FeatureMap<T>& dy, const FeatureMap<T>& y) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= y.data[i] * (T(1) - y.data[i]);
}

// ---------------------------------------------------------------------------
// 3x3 max pooling, stride 2, per-axis padding (padded cells never win).

inline int pooled_size(int n, int pad) { return (n + 2 * pad - 3) / 2 + 1; }

struct MaxPoolCache {
  std::vector<std::uint32_t> argmax;  // flat input index per output cell
  int in_height = 0;
  int in_width = 0;
};

template <class T>
FeatureMap<T> maxpool3x3s2_forward(const FeatureMap<T>& x, int pad_h, int pad_w, MaxPoolCache* cache) {
  const int Ho = pooled_size(x.height, pad_h);
  const int Wo = pooled_size(x.width, pad_w);
  if (Ho <= 0 || Wo <= 0) throw ShapeError("max-pool input too small");
  FeatureMap<T> y(x.channels, x.batch, Ho, Wo);
  if (cache) {
    cache->argmax.assign(y.data.size(), 0);
    cache->in_height = x.height;
    cache->in_width = x.width;
  }
  std::size_t o = 0;
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const std::size_t base = (static_cast<std::size_t>(c) * x.batch + n) * x.plane();
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = base;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * 2 - pad_h + ky;
            if (iy < 0 || iy >= x.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * 2 - pad_w + kx;
              if (ix < 0 || ix >= x.width) continue;
              const std::size_t idx = base + static_cast<std::size_t>(iy) * x.width + ix;
              if (x.data[idx] > best) {
                best = x.data[idx];
                best_idx = idx;
              }
            }
          }
          y.data[o] = best;
          if (cache) cache->argmax[o] = static_cast<std::uint32_t>(best_idx);
        }
      }
    }
  }
  return y;
}

template <class T>
FeatureMap<T> maxpool_backward(const FeatureMap<T>& dy, const MaxPoolCache& cache) {
  FeatureMap<T> dx(dy.channels, dy.batch, cache.in_height, cache.in_width);
  for (std::size_t o = 0; o < dy.data.size(); ++o) dx.data[cache.argmax[o]] += dy.data[o];
  return dx;
}

// ---------------------------------------------------------------------------
// 2x2 transpose convolution, stride 2, with output padding. Output size is
// 2*n + output_padding; padded cells only receive the bias.

template <class T>
struct TransposeConvCache {
  FeatureMap<T> input;
};

/// weight: [Cin, Cout, 2, 2], bias: [Cout].
template <class T>
FeatureMap<T> tconv2x2s2_forward(const FeatureMap<T>& x, std::span<const T> weight, std::span<const T> bias,
                                 int out_channels, int out_pad_h, int out_pad_w, TransposeConvCache<T>* cache) {
  ConstMatMap<T> w(weight.data(), x.channels, static_cast<Eigen::Index>(out_channels) * 4);
  MatrixRM<T> taps = w.transpose() * x.matrix();  // [Cout*4, N*H*W]
  const int Ho = 2 * x.height + out_pad_h, Wo = 2 * x.width + out_pad_w;
  FeatureMap<T> y(out_channels, x.batch, Ho, Wo);
  for (int co = 0; co < out_channels; ++co) {
    const T b = bias[static_cast<std::size_t>(co)];
    for (int n = 0; n < x.batch; ++n) {
      T* out = &y.data[(static_cast<std::size_t>(co) * x.batch + n) * y.plane()];
      std::fill(out, out + y.plane(), b);
      for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
          const T* t = taps.row(co * 4 + ky * 2 + kx).data() + static_cast<std::size_t>(n) * x.plane();
          for (int iy = 0; iy < x.height; ++iy) {
            T* orow = out + static_cast<std::size_t>(2 * iy + ky) * Wo + kx;
            const T* trow = t + static_cast<std::size_t>(iy) * x.width;
            for (int ix = 0; ix < x.width; ++ix) orow[2 * ix] += trow[ix];
          }
        }
      }
    }
  }
  if (cache) cache->input = x;
  return y;
}

template <class T>
FeatureMap<T> tconv2x2s2_backward(const FeatureMap<T>& dy, const TransposeConvCache<T>& cache,
                                  std::span<const T> weight, std::span<T> dweight, std::span<T> dbias) {
  const auto& x = cache.input;
  const int Wo = dy.width;
  MatrixRM<T> dtaps(static_cast<Eigen::Index>(dy.channels) * 4, static_cast<Eigen::Index>(x.columns()));
  for (int co = 0; co < dy.channels; ++co) {
    T sum = 0;
    for (int n = 0; n < dy.batch; ++n) {
      const T* g = &dy.data[(static_cast<std::size_t>(co) * dy.batch + n) * dy.plane()];
      for (std::size_t i = 0; i < dy.plane(); ++i) sum += g[i];
      for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
          T* t = dtaps.row(co * 4 + ky * 2 + kx).data() + static_cast<std::size_t>(n) * x.plane();
          for (int iy = 0; iy < x.height; ++iy) {
            const T* grow = g + static_cast<std::size_t>(2 * iy + ky) * Wo + kx;
            T* trow = t + static_cast<std::size_t>(iy) * x.width;
            for (int ix = 0; ix < x.width; ++ix) trow[ix] = grow[2 * ix];
          }
        }
      }
    }
    dbias[static_cast<std::size_t>(co)] += sum;
  }
  ConstMatMap<T> w(weight.data(), x.channels, static_cast<Eigen::Index>(dy.channels) * 4);
  MatMap<T> dw(dweight.data(), x.channels, static_cast<Eigen::Index>(dy.channels) * 4);
  dw.noalias() += x.matrix() * dtaps.transpose();
  FeatureMap<T> dx(x.channels, x.batch, x.height, x.width);
  dx.matrix().noalias() = w * dtaps;
  return dx;
}

}  // namespace apn
