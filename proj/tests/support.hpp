#pragma once

// Helpers and brute-force oracles shared by the unit tests and the acceptance
// binary. Oracles are written independently of the library: plain loops over
// std::vector<double>, no Eigen, no library math.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "autoprotonet.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "apn") {
    static std::mt19937_64 gen(std::random_device{}());
    path_ = fs::temp_directory_path() / (tag + "-" + std::to_string(gen()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& p) const { return path_ / p; }

 private:
  fs::path path_;
};

inline apn::ImageTensor random_image(apn::Rng& rng, apn::Resolution res) {
  apn::ImageTensor img(res.height, res.width);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform01());
  return img;
}

/// Random image whose values survive a PNG round trip unchanged.
inline apn::ImageTensor random_png_image(apn::Rng& rng, apn::Resolution res) {
  apn::ImageTensor img(res.height, res.width);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform_index(256)) / 255.0f;
  return apn::quantize_8bit(img);
}

inline std::vector<float> row_of(const apn::EmbeddingMatrix& m, Eigen::Index r) {
  return {m.row(r).data(), m.row(r).data() + m.cols()};
}

// ---------------------------------------------------------------------------
// Oracles

using Vec = std::vector<double>;

inline double sq_dist_oracle(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// Per-coordinate class means.
inline std::vector<Vec> prototypes_oracle(const std::vector<Vec>& emb, const std::vector<int>& labels, int way) {
  std::vector<Vec> sum(static_cast<std::size_t>(way), Vec(emb.at(0).size(), 0.0));
  std::vector<int> n(static_cast<std::size_t>(way), 0);
  for (std::size_t i = 0; i < emb.size(); ++i) {
    for (std::size_t j = 0; j < emb[i].size(); ++j) sum[labels[i]][j] += emb[i][j];
    ++n[labels[i]];
  }
  for (int k = 0; k < way; ++k)
    for (auto& v : sum[k]) v /= n[k];
  return sum;
}

/// Softmax of negative distances, computed in long double without shifting.
inline Vec softmax_oracle(const Vec& distances) {
  long double z = 0;
  std::vector<long double> e;
  for (double d : distances) {
    e.push_back(std::exp(-static_cast<long double>(d)));
    z += e.back();
  }
  Vec out;
  for (auto v : e) out.push_back(static_cast<double>(v / z));
  return out;
}

inline Vec classify_oracle(const std::vector<Vec>& protos, const Vec& q) {
  Vec d;
  for (const auto& p : protos) d.push_back(sq_dist_oracle(q, p));
  return softmax_oracle(d);
}

inline double nll_oracle(const std::vector<Vec>& protos, const std::vector<Vec>& queries, const std::vector<int>& y) {
  double s = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) s -= std::log(classify_oracle(protos, queries[i])[y[i]]);
  return s / static_cast<double>(queries.size());
}

inline double mse_oracle(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// Argmin of squared distance; first minimum wins.
inline int nearest_oracle(const std::vector<Vec>& protos, const Vec& q) {
  int best = 0;
  double bd = sq_dist_oracle(q, protos[0]);
  for (std::size_t k = 1; k < protos.size(); ++k) {
    const double d = sq_dist_oracle(q, protos[k]);
    if (d < bd) {
      bd = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-12, std::max(std::abs(a), std::abs(b))); }

/// Hand-rolled Nesterov SGD with L2 weight decay on f(x) = 0.5 * sum(a_i x_i^2)
/// (gradient a_i x_i), written out step by step.
inline std::vector<Vec> nesterov_trace_oracle(Vec x, const Vec& a, double lr, double momentum, double wd, int steps) {
  std::vector<Vec> trace;
  Vec buf(x.size(), 0.0);
  for (int t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double g = a[i] * x[i] + wd * x[i];
      buf[i] = t == 0 ? g : momentum * buf[i] + g;
      const double step = g + momentum * buf[i];
      x[i] -= lr * step;
    }
    trace.push_back(x);
  }
  return trace;
}

/// Direct 3x3 same-padding convolution, [C, N, H, W] layout as nested loops.
template <class T>
apn::FeatureMap<T> conv3x3_oracle(const apn::FeatureMap<T>& x, const std::vector<T>& w, const std::vector<T>& b,
                                  int cout) {
  apn::FeatureMap<T> y(cout, x.batch, x.height, x.width);
  for (int o = 0; o < cout; ++o)
    for (int n = 0; n < x.batch; ++n)
      for (int r = 0; r < x.height; ++r)
        for (int c = 0; c < x.width; ++c) {
          double s = b[o];
          for (int i = 0; i < x.channels; ++i)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int yy = r + ky - 1, xx = c + kx - 1;
                if (yy < 0 || yy >= x.height || xx < 0 || xx >= x.width) continue;
                s += static_cast<double>(w[((o * x.channels + i) * 3 + ky) * 3 + kx]) * x.at(i, n, yy, xx);
              }
          y.at(o, n, r, c) = static_cast<T>(s);
        }
  return y;
}

/// Small model used across tests: 16x16 input, 8 channels, 2 blocks.
inline apn::ArchitectureConfig small_arch() { return apn::make_architecture({16, 16}, 8, 2); }

/// Synthetic splits at a given resolution.
inline apn::SplitDatasets synthetic_splits(apn::Resolution res, int classes, int images, int train, int val,
                                           int test, std::uint64_t seed = 0) {
  return apn::split_classes(apn::generate_synthetic_dataset(classes, images, res, seed), train, val, test);
}

// ---------------------------------------------------------------------------
// Gradient checking

// Episode loss L_C + lambda * L_R; rows [0, n_support) of the batch are the
// support set.
template <typename T>
struct Episode {
  apn::ArchitectureConfig arch;
  apn::Model<T> model;
  apn::FeatureMap<T> x;
  std::vector<int> labels;
  std::size_t n_support;
  int way;

  Episode(apn::ArchitectureConfig a, std::uint64_t seed, std::vector<int> y, std::size_t support, int w)
      : arch(a), model(arch, apn::initialize_parameters(arch, seed).cast<T>()), labels(std::move(y)),
        n_support(support), way(w) {
    apn::Rng rng(seed + 1);
    std::vector<apn::ImageTensor> imgs;
    for (std::size_t i = 0; i < labels.size(); ++i) imgs.push_back(random_image(rng, arch.input_resolution));
    x = apn::images_to_batch<T>(imgs, arch.input_resolution);
  }

  T loss(T lambda, bool classify) {
    const auto z = model.encode_train(x);
    T l = 0;
    if (classify) l += apn::prototypical_loss_with_grad<T>(z, labels, n_support, way).loss;
    if (lambda != 0) l += lambda * apn::mse_with_grad(model.decode_train(z), x).loss;
    return l;
  }

  void backward(T lambda, bool classify) {
    model.zero_grad();
    const auto z = model.encode_train(x);
    apn::MatrixRM<T> dz = apn::MatrixRM<T>::Zero(z.rows(), z.cols());
    if (classify) dz += apn::prototypical_loss_with_grad<T>(z, labels, n_support, way).grad;
    if (lambda != 0) {
      auto m = apn::mse_with_grad(model.decode_train(z), x);
      for (auto& g : m.grad.data) g *= lambda;
      dz += model.backward_decoder(std::move(m.grad));
    }
    model.backward_encoder(dz);
  }
};

using Episode64 = Episode<double>;

struct TensorGradientError {
  std::string name;
  double relative_error;
  double analytic_norm;
  double numeric_norm;
};

// Analytic gradients at float64 against central differences of the same
// loss. The differences are taken in long double: a conv bias feeding
// train-mode batch norm has an exact gradient of zero, and at float64 the
// quotient (L(+h) - L(-h)) / 2h is rounding noise of about eps * L / h there.
// Per tensor: ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6).
inline std::vector<TensorGradientError> gradient_errors(Episode64& f, double lambda, bool classify) {
  std::vector<TensorGradientError> out;
  f.backward(lambda, classify);
  const auto analytic = f.model.gradients();
  Episode<long double> ext(f.arch, 0, f.labels, f.n_support, f.way);
  ext.model = apn::Model<long double>(f.arch, f.model.parameters().template cast<long double>());
  for (std::size_t i = 0; i < f.x.data.size(); ++i) ext.x.data[i] = f.x.data[i];
  const long double h = 1e-6L;
  for (std::size_t i = 0; i < ext.model.parameters().size(); ++i) {
    auto& p = ext.model.parameters()[i];
    if (!p.trainable) continue;
    double diff = 0, na = 0, nn = 0;
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      const long double keep = p.values[j];
      p.values[j] = keep + h;
      const long double up = ext.loss(lambda, classify);
      p.values[j] = keep - h;
      const long double down = ext.loss(lambda, classify);
      p.values[j] = keep;
      const double num = static_cast<double>((up - down) / (2 * h));
      const double ana = analytic[i][j];
      diff += (num - ana) * (num - ana);
      na += ana * ana;
      nn += num * num;
    }
    const double err = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-6});
    out.push_back({p.name, err, std::sqrt(na), std::sqrt(nn)});
  }
  return out;
}

}  // namespace testing_support
