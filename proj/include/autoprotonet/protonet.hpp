#pragma once

// Prototype computation, distance-softmax classification and the episode
// losses. Public entry points work on float embeddings with double
// accumulation; the `*_with_grad` variants are templated so the float64
// gradient check runs the same code as training.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "autoprotonet/core.hpp"
#include "autoprotonet/datasets.hpp"
#include "autoprotonet/network.hpp"

namespace apn {

enum class Distance { SquaredEuclidean, Euclidean };

inline std::string to_string(Distance d) {
  return d == Distance::SquaredEuclidean ? "squared_euclidean" : "euclidean";
}

inline Distance distance_from_string(const std::string& s) {
  if (s == "squared_euclidean") return Distance::SquaredEuclidean;
  if (s == "euclidean") return Distance::Euclidean;
  throw InvalidArgument("unknown distance '" + s + "'");
}

/// One prototype per class (rows of `prototypes`).
struct PrototypeSet {
  EmbeddingMatrix prototypes;
  std::vector<std::string> class_names;
  Distance distance = Distance::SquaredEuclidean;

  int way() const { return static_cast<int>(prototypes.rows()); }
  int dim() const { return static_cast<int>(prototypes.cols()); }
};

struct ClassDistribution {
  std::vector<double> probabilities;

  /// Most probable class; ties go to the lowest class index.
  int argmax() const {
    return static_cast<int>(std::max_element(probabilities.begin(), probabilities.end()) - probabilities.begin());
  }
};

struct LossBreakdown {
  double classification = 0.0;
  double reconstruction = 0.0;
  double total = 0.0;
  double lambda = 1.0;

  static LossBreakdown make(double classification, double reconstruction, double lambda) {
    return {classification, reconstruction, classification + lambda * reconstruction, lambda};
  }
};

namespace detail {

inline void check_labels(std::span<const int> labels, int way) {
  for (int y : labels) {
    if (y < 0 || y >= way) throw InvalidArgument("class index " + std::to_string(y) + " outside [0," +
                                                 std::to_string(way) + ")");
  }
}

template <class T>
T distance(const T* a, const T* b, Eigen::Index m, Distance kind) {
  T s = 0;
  for (Eigen::Index i = 0; i < m; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return kind == Distance::SquaredEuclidean ? s : std::sqrt(s);
}

/// Mean of rows per class; every class must be non-empty.
template <class T, class Acc = T>
MatrixRM<T> class_means(const MatrixRM<T>& rows, std::span<const int> labels, int way) {
  if (static_cast<std::size_t>(rows.rows()) != labels.size()) {
    throw InvalidArgument("embedding count does not match label count");
  }
  check_labels(labels, way);
  Eigen::Matrix<Acc, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sum =
      Eigen::Matrix<Acc, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(way, rows.cols());
  std::vector<int> count(static_cast<std::size_t>(way), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sum.row(labels[i]) += rows.row(static_cast<Eigen::Index>(i)).template cast<Acc>();
    ++count[static_cast<std::size_t>(labels[i])];
  }
  for (int k = 0; k < way; ++k) {
    if (count[static_cast<std::size_t>(k)] == 0) {
      throw InvalidArgument("class index " + std::to_string(k) + " has no support embeddings");
    }
    sum.row(k) /= static_cast<Acc>(count[static_cast<std::size_t>(k)]);
  }
  return sum.template cast<T>();
}

}  // namespace detail

/// p_k = mean of the embeddings labelled k.
inline PrototypeSet compute_prototypes(const EmbeddingMatrix& embeddings, std::span<const int> labels, int way,
                                       std::vector<std::string> class_names = {},
                                       Distance distance = Distance::SquaredEuclidean) {
  if (way < 2) throw InvalidArgument("a prototype set needs at least 2 classes");
  if (class_names.empty()) {
    for (int k = 0; k < way; ++k) class_names.push_back("class" + std::to_string(k));
  }
  if (static_cast<int>(class_names.size()) != way) throw InvalidArgument("class_names length must equal way");
  for (std::size_t i = 0; i < class_names.size(); ++i)
    for (std::size_t j = i + 1; j < class_names.size(); ++j)
      if (class_names[i] == class_names[j]) throw InvalidArgument("duplicate class name '" + class_names[i] + "'");
  return {detail::class_means<float, double>(embeddings, labels, way), std::move(class_names), distance};
}

/// Distances from `query` to every prototype, in double precision.
inline std::vector<double> prototype_distances(const PrototypeSet& prototypes, std::span<const float> query) {
  if (static_cast<int>(query.size()) != prototypes.dim()) {
    throw ShapeError("query dimension " + std::to_string(query.size()) + " does not match prototype dimension " +
                     std::to_string(prototypes.dim()));
  }
  std::vector<double> d(static_cast<std::size_t>(prototypes.way()));
  for (int k = 0; k < prototypes.way(); ++k) {
    double s = 0;
    for (int i = 0; i < prototypes.dim(); ++i) {
      const double diff = static_cast<double>(query[static_cast<std::size_t>(i)]) - prototypes.prototypes(k, i);
      s += diff * diff;
    }
    d[static_cast<std::size_t>(k)] = prototypes.distance == Distance::SquaredEuclidean ? s : std::sqrt(s);
  }
  return d;
}

/// softmax(-d(q, p_k)) with max-subtraction.
inline ClassDistribution classify(const PrototypeSet& prototypes, std::span<const float> query) {
  const auto d = prototype_distances(prototypes, query);
  const double dmin = *std::min_element(d.begin(), d.end());
  ClassDistribution out{std::vector<double>(d.size())};
  double z = 0;
  for (std::size_t k = 0; k < d.size(); ++k) z += out.probabilities[k] = std::exp(dmin - d[k]);
  for (auto& p : out.probabilities) p /= z;
  return out;
}

inline ClassDistribution classify(const PrototypeSet& prototypes, const EmbeddingMatrix& queries, Eigen::Index row) {
  return classify(prototypes, std::span<const float>(queries.row(row).data(), static_cast<std::size_t>(queries.cols())));
}

/// Mean negative log-likelihood of the true classes, via log-sum-exp.
inline double classification_loss(const PrototypeSet& prototypes, const EmbeddingMatrix& queries,
                                  std::span<const int> labels) {
  if (queries.rows() == 0) throw InvalidArgument("classification_loss needs at least one query");
  if (static_cast<std::size_t>(queries.rows()) != labels.size()) {
    throw InvalidArgument("query count does not match label count");
  }
  detail::check_labels(labels, prototypes.way());
  double total = 0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const auto d = prototype_distances(
        prototypes, std::span<const float>(queries.row(q).data(), static_cast<std::size_t>(queries.cols())));
    const double dmin = *std::min_element(d.begin(), d.end());
    double s = 0;
    for (double dk : d) s += std::exp(dmin - dk);
    total += d[static_cast<std::size_t>(labels[static_cast<std::size_t>(q)])] - dmin + std::log(s);
  }
  return total / static_cast<double>(queries.rows());
}

inline double reconstruction_loss(std::span<const float> originals, std::span<const float> reconstructions) {
  if (originals.size() != reconstructions.size()) throw ShapeError("reconstruction shape mismatch");
  if (originals.empty()) throw InvalidArgument("reconstruction_loss needs non-empty inputs");
  double s = 0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    const double d = static_cast<double>(originals[i]) - reconstructions[i];
    s += d * d;
  }
  return s / static_cast<double>(originals.size());
}

/// Mean squared error over every pixel of every image.
inline double reconstruction_loss(std::span<const ImageTensor> originals, std::span<const ImageTensor> reconstructions) {
  if (originals.size() != reconstructions.size()) throw ShapeError("reconstruction shape mismatch: image counts differ");
  if (originals.empty()) throw InvalidArgument("reconstruction_loss needs at least one image");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    if (originals[i].resolution() != reconstructions[i].resolution()) {
      throw ShapeError("reconstruction shape mismatch at image " + std::to_string(i));
    }
    s += reconstruction_loss(originals[i].data(), reconstructions[i].data()) * static_cast<double>(originals[i].size());
    n += originals[i].size();
  }
  return s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Differentiable episode losses

template <class T>
struct PrototypicalLossResult {
  T loss = 0;
  int correct = 0;
  int total = 0;
  MatrixRM<T> grad;  // d(loss)/d(embeddings), same shape as the input

  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

/// Episode classification loss on one embedding batch: rows [0, n_support)
/// are support, the remainder are queries. Prototypes are the support class
/// means, so the gradient flows through both queries and support.
template <class T>
PrototypicalLossResult<T> prototypical_loss_with_grad(const MatrixRM<T>& z, std::span<const int> labels,
                                                      std::size_t n_support, int way,
                                                      Distance kind = Distance::SquaredEuclidean) {
  const auto n = static_cast<std::size_t>(z.rows());
  if (labels.size() != n) throw InvalidArgument("embedding count does not match label count");
  if (n_support == 0 || n_support >= n) throw InvalidArgument("episode needs both support and query rows");
  const Eigen::Index M = z.cols();
  const MatrixRM<T> support = z.topRows(static_cast<Eigen::Index>(n_support));
  const auto support_labels = labels.first(n_support);
  const MatrixRM<T> protos = detail::class_means<T>(support, support_labels, way);
  std::vector<int> counts(static_cast<std::size_t>(way), 0);
  for (int y : support_labels) ++counts[static_cast<std::size_t>(y)];

  PrototypicalLossResult<T> r;
  r.grad = MatrixRM<T>::Zero(z.rows(), M);
  MatrixRM<T> dprotos = MatrixRM<T>::Zero(way, M);
  const auto n_query = n - n_support;
  r.total = static_cast<int>(n_query);
  std::vector<T> d(static_cast<std::size_t>(way)), p(static_cast<std::size_t>(way));
  for (std::size_t q = n_support; q < n; ++q) {
    const int y = labels[q];
    if (y < 0 || y >= way) throw InvalidArgument("query label outside [0, way)");
    const T* zq = z.row(static_cast<Eigen::Index>(q)).data();
    for (int k = 0; k < way; ++k) d[static_cast<std::size_t>(k)] = detail::distance(zq, protos.row(k).data(), M, kind);
    const T dmin = *std::min_element(d.begin(), d.end());
    T s = 0;
    for (int k = 0; k < way; ++k) s += p[static_cast<std::size_t>(k)] = std::exp(dmin - d[static_cast<std::size_t>(k)]);
    for (auto& pk : p) pk /= s;
    r.loss += d[static_cast<std::size_t>(y)] - dmin + std::log(s);
    const int pred = static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin());
    r.correct += pred == y ? 1 : 0;
    // d(loss)/d(d_k) = (delta_ky - p_k) / Q
    for (int k = 0; k < way; ++k) {
      const T gd = ((k == y ? T(1) : T(0)) - p[static_cast<std::size_t>(k)]) / static_cast<T>(n_query);
      T scale;  // d(d_k)/d(z_q) = scale * (z_q - p_k)
      if (kind == Distance::SquaredEuclidean) {
        scale = T(2);
      } else {
        const T dk = d[static_cast<std::size_t>(k)];
        scale = dk > T(0) ? T(1) / dk : T(0);
      }
      const auto diff = (z.row(static_cast<Eigen::Index>(q)) - protos.row(k)).eval();
      r.grad.row(static_cast<Eigen::Index>(q)) += gd * scale * diff;
      dprotos.row(k) -= gd * scale * diff;
    }
  }
  r.loss /= static_cast<T>(n_query);
  for (std::size_t s_i = 0; s_i < n_support; ++s_i) {
    const int y = labels[s_i];
    r.grad.row(static_cast<Eigen::Index>(s_i)) += dprotos.row(y) / static_cast<T>(counts[static_cast<std::size_t>(y)]);
  }
  return r;
}

template <class T>
struct MseResult {
  T loss = 0;
  FeatureMap<T> grad;
};

template <class T>
MseResult<T> mse_with_grad(const FeatureMap<T>& reconstruction, const FeatureMap<T>& target) {
  if (reconstruction.data.size() != target.data.size()) throw ShapeError("reconstruction shape mismatch");
  MseResult<T> r;
  r.grad = FeatureMap<T>(target.channels, target.batch, target.height, target.width);
  const T n = static_cast<T>(target.data.size());
  for (std::size_t i = 0; i < target.data.size(); ++i) {
    const T diff = reconstruction.data[i] - target.data[i];
    r.loss += diff * diff;
    r.grad.data[i] = T(2) * diff / n;
  }
  r.loss /= n;
  return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning algorithm A

/// theta_i = (prototypes, theta): prototypes from the support set plus a
/// reference to the untouched base model.
struct AdaptedModel {
  PrototypeSet prototypes;
  std::reference_wrapper<const Model<float>> model;
};

inline std::vector<ImageTensor> images_of(std::span<const LabeledImage> items) {
  std::vector<ImageTensor> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.image);
  return out;
}

inline std::vector<int> labels_of(std::span<const LabeledImage> items) {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

/// Computes prototypes from eval-mode support embeddings; never modifies the
/// model.
inline AdaptedModel finetune(const Model<float>& model, std::span<const LabeledImage> support,
                             std::vector<std::string> class_names = {},
                             Distance distance = Distance::SquaredEuclidean) {
  if (support.empty()) throw InvalidArgument("support set is empty");
  const auto labels = labels_of(support);
  const int way = class_names.empty() ? *std::max_element(labels.begin(), labels.end()) + 1
                                      : static_cast<int>(class_names.size());
  const auto images = images_of(support);
  return {compute_prototypes(encode(model, images), labels, way, std::move(class_names), distance), std::cref(model)};
}

}  // namespace apn
