#pragma once

// Prototype classifier and K-means based adaptation in embedding space.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "fewshot/common.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

/// One mean vector (row) per class.
struct PrototypeSet {
  Matrix means;
  std::vector<ClassId> classes;

  [[nodiscard]] std::size_t size() const { return classes.size(); }
  [[nodiscard]] Eigen::Index dim() const { return means.cols(); }
};

/// Class means of labeled embeddings. Classes are the sorted distinct labels,
/// or exactly 0..way-1 when `way` is given (each must then be present).
inline PrototypeSet compute_prototypes(const Matrix& z, std::span<const ClassId> labels, int way = 0) {
  if (static_cast<std::size_t>(z.rows()) != labels.size())
    throw ShapeError("compute_prototypes: row count differs from label count");
  if (labels.empty()) throw AdaptationError("compute_prototypes: no labeled samples");
  ClassId max_label = -1;
  for (ClassId c : labels) {
    if (c < 0) throw AdaptationError("compute_prototypes: masked or negative label");
    max_label = std::max(max_label, c);
  }
  const int slots = std::max(way, max_label + 1);
  if (way > 0 && max_label >= way) throw AdaptationError("compute_prototypes: label outside [0, way)");

  Matrix sums = Matrix::Zero(slots, z.cols());
  std::vector<int> counts(static_cast<std::size_t>(slots), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sums.row(labels[i]) += z.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(labels[i])];
  }

  PrototypeSet out;
  for (int c = 0; c < slots; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      if (way > 0) throw AdaptationError("compute_prototypes: class " + std::to_string(c) + " has no samples");
      continue;
    }
    out.classes.push_back(c);
  }
  out.means.resize(static_cast<Eigen::Index>(out.classes.size()), z.cols());
  for (std::size_t k = 0; k < out.classes.size(); ++k) {
    const ClassId c = out.classes[k];
    out.means.row(static_cast<Eigen::Index>(k)) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  return out;
}

/// Index of the nearest row of `means` (squared Euclidean), lowest index on ties.
template <typename Row>
inline int nearest_index(const Eigen::MatrixBase<Row>& z, const Matrix& means) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < means.rows(); ++c) {
    const double d = squared_distance(z, means.row(c));
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

/// Softmax over negative squared distances to each row of `means`.
template <typename Row>
inline Vector softmax_neg_sqdist(const Eigen::MatrixBase<Row>& z, const Matrix& means) {
  if (z.size() != means.cols()) throw ShapeError("posterior: embedding dimension mismatch");
  Vector logits(means.rows());
  for (Eigen::Index c = 0; c < means.rows(); ++c) logits[c] = -squared_distance(z, means.row(c));
  const double top = logits.maxCoeff();
  Vector p = (logits.array() - top).exp().matrix();
  return p / p.sum();
}

template <typename Row>
inline Vector class_posterior(const Eigen::MatrixBase<Row>& z, const PrototypeSet& protos) {
  return softmax_neg_sqdist(z, protos.means);
}

/// Nearest-prototype class. Equivalent to the posterior argmax, but decided on
/// distances directly so that near-ties are not blurred by exp() rounding.
template <typename Row>
inline ClassId predict(const Eigen::MatrixBase<Row>& z, const PrototypeSet& protos) {
  if (z.size() != protos.dim()) throw ShapeError("predict: embedding dimension mismatch");
  return protos.classes[static_cast<std::size_t>(nearest_index(z, protos.means))];
}

inline std::vector<ClassId> predict_all(const Matrix& z, const PrototypeSet& protos) {
  std::vector<ClassId> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) out[static_cast<std::size_t>(i)] = predict(z.row(i), protos);
  return out;
}

// --------------------------------------------------------------------------
// K-means

enum class KMeansVariant { SeededHard, ConstrainedHard, Soft };

struct KMeansMode {
  KMeansVariant variant = KMeansVariant::SeededHard;
  int max_iters = 10;

  static KMeansMode soft(int iters = 1) { return {KMeansVariant::Soft, iters}; }
};

struct ClusterState {
  Matrix means;
  std::vector<int> hard_assign;
  Matrix soft_assign;  // rows x clusters, soft mode only
  std::vector<ClassId> cluster_class;
  int iterations_run = 0;
  double objective = 0.0;
  /// Objective after 0, 1, ... mean updates (hard modes).
  std::vector<double> objective_trace;
  bool converged = false;

  [[nodiscard]] int num_clusters() const { return static_cast<int>(means.rows()); }

  [[nodiscard]] std::vector<int> cluster_sizes() const {
    std::vector<int> sizes(static_cast<std::size_t>(num_clusters()), 0);
    for (int a : hard_assign) ++sizes[static_cast<std::size_t>(a)];
    return sizes;
  }
};

inline double kmeans_objective(const Matrix& points, const Matrix& means, std::span<const int> assign) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    total += squared_distance(points.row(i), means.row(assign[static_cast<std::size_t>(i)]));
  return total;
}

inline double kmeans_objective(const ClusterState& state, const Matrix& points) {
  if (state.hard_assign.size() != static_cast<std::size_t>(points.rows()))
    throw ShapeError("kmeans_objective: assignment size differs from point count");
  return kmeans_objective(points, state.means, state.hard_assign);
}

namespace detail {

/// Nearest-mean assignment; points with pinned[i] >= 0 keep that cluster.
inline std::vector<int> assign_step(const Matrix& points, const Matrix& means, std::span<const int> pinned) {
  std::vector<int> a(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    a[idx] = (!pinned.empty() && pinned[idx] >= 0) ? pinned[idx] : nearest_index(points.row(i), means);
  }
  return a;
}

/// Arithmetic means of assigned points. An empty cluster keeps its previous mean.
inline Matrix update_step(const Matrix& points, std::span<const int> assign, const Matrix& previous) {
  Matrix sums = Matrix::Zero(previous.rows(), previous.cols());
  std::vector<int> counts(static_cast<std::size_t>(previous.rows()), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int c = assign[static_cast<std::size_t>(i)];
    sums.row(c) += points.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  Matrix means = previous;
  for (Eigen::Index c = 0; c < means.rows(); ++c)
    if (counts[static_cast<std::size_t>(c)] > 0) means.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
  return means;
}

}  // namespace detail

/// Lloyd iterations from the given initial means. An iteration is one
/// assignment step followed, if the assignment changed, by a mean update; the
/// run stops when an assignment repeats or after `max_iters` iterations.
inline ClusterState lloyd(const Matrix& points, Matrix init_means, std::span<const int> pinned, int max_iters) {
  if (max_iters < 0) throw ConfigError("lloyd: max_iters must be >= 0");
  if (init_means.rows() == 0) throw AdaptationError("lloyd: no initial means");
  if (points.rows() > 0 && points.cols() != init_means.cols()) throw ShapeError("lloyd: dimension mismatch");

  ClusterState s;
  s.means = std::move(init_means);
  std::vector<int> assign = detail::assign_step(points, s.means, pinned);
  std::vector<int> previous;
  s.objective_trace.push_back(kmeans_objective(points, s.means, assign));
  for (int it = 1; it <= max_iters; ++it) {
    s.iterations_run = it;
    if (it > 1 && assign == previous) {
      s.converged = true;
      break;
    }
    previous = assign;
    s.means = detail::update_step(points, assign, s.means);
    assign = detail::assign_step(points, s.means, pinned);
    s.objective_trace.push_back(kmeans_objective(points, s.means, assign));
  }
  if (!s.converged && !previous.empty() && assign == previous) s.converged = true;
  s.hard_assign = std::move(assign);
  s.objective = kmeans_objective(points, s.means, s.hard_assign);
  s.cluster_class.assign(static_cast<std::size_t>(s.means.rows()), kUnassigned);
  return s;
}

namespace detail {

inline ClusterState soft_kmeans(const Matrix& points, std::span<const int> pinned, Matrix means, int iters) {
  const Eigen::Index n = points.rows();
  const Eigen::Index k = means.rows();
  auto weights = [&](const Matrix& m) {
    Matrix w(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int pin = pinned[static_cast<std::size_t>(i)];
      if (pin >= 0) {
        w.row(i).setZero();
        w(i, pin) = 1.0;
      } else {
        w.row(i) = softmax_neg_sqdist(points.row(i), m).transpose();
      }
    }
    return w;
  };

  ClusterState s;
  s.means = std::move(means);
  for (int it = 1; it <= iters; ++it) {
    const Matrix w = weights(s.means);
    const RowVector mass = w.colwise().sum();
    const Matrix sums = w.transpose() * points;
    for (Eigen::Index c = 0; c < k; ++c)
      if (mass[c] > 0.0) s.means.row(c) = sums.row(c) / mass[c];
    s.iterations_run = it;
  }
  s.soft_assign = weights(s.means);
  s.hard_assign = assign_step(points, s.means, pinned);
  s.objective = kmeans_objective(points, s.means, s.hard_assign);
  s.objective_trace.push_back(s.objective);
  s.cluster_class.assign(static_cast<std::size_t>(k), kUnassigned);
  return s;
}

}  // namespace detail

/// Semi-supervised K-means over labeled + unlabeled embeddings, seeded with the
/// labeled prototypes. Points are ordered labeled first, then unlabeled.
/// Cluster c carries class c (classes must be 0..way-1). With no unlabeled
/// points no iterations run, so the result is the supervised classifier.
inline ClusterState seeded_kmeans(const Matrix& labeled, std::span<const ClassId> labels, const Matrix& unlabeled,
                                  const KMeansMode& mode, int way = 0) {
  if (mode.max_iters < 0) throw ConfigError("seeded_kmeans: max_iters must be >= 0");
  PrototypeSet protos = compute_prototypes(labeled, labels, way);
  if (unlabeled.rows() > 0 && unlabeled.cols() != labeled.cols()) throw ShapeError("seeded_kmeans: dimension mismatch");
  for (std::size_t k = 0; k < protos.classes.size(); ++k)
    if (protos.classes[k] != static_cast<ClassId>(k))
      throw AdaptationError("seeded_kmeans: labeled set must cover classes 0..N-1");

  const Matrix points = vstack({&labeled, &unlabeled});
  std::vector<int> pinned(static_cast<std::size_t>(points.rows()), kUnassigned);
  const bool pin_labeled = mode.variant != KMeansVariant::SeededHard;
  if (pin_labeled)
    for (std::size_t i = 0; i < labels.size(); ++i) pinned[i] = labels[i];

  const int iters = unlabeled.rows() == 0 ? 0 : mode.max_iters;
  ClusterState s = mode.variant == KMeansVariant::Soft
                       ? detail::soft_kmeans(points, pinned, std::move(protos.means), iters)
                       : lloyd(points, std::move(protos.means), pinned, iters);
  for (std::size_t c = 0; c < s.cluster_class.size(); ++c) s.cluster_class[c] = static_cast<ClassId>(c);
  return s;
}

/// Class of a cluster, falling back to the class of the nearest labeled
/// cluster when this one has no label. Returns kUnassigned if none is labeled.
inline ClassId resolved_class(const ClusterState& s, int cluster) {
  const ClassId own = s.cluster_class[static_cast<std::size_t>(cluster)];
  if (own != kUnassigned) return own;
  ClassId best = kUnassigned;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < s.num_clusters(); ++c) {
    if (s.cluster_class[static_cast<std::size_t>(c)] == kUnassigned) continue;
    const double d = squared_distance(s.means.row(cluster), s.means.row(c));
    if (d < best_d) {
      best_d = d;
      best = s.cluster_class[static_cast<std::size_t>(c)];
    }
  }
  return best;
}

/// Classes of the clustered samples themselves (via hard assignments).
inline std::vector<ClassId> sample_classes(const ClusterState& s) {
  std::vector<ClassId> out(s.hard_assign.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = resolved_class(s, s.hard_assign[i]);
  return out;
}

/// Classes of arbitrary embeddings via their nearest cluster mean.
inline std::vector<ClassId> predict_with_state(const ClusterState& s, const Matrix& z) {
  if (z.rows() > 0 && z.cols() != s.means.cols()) throw ShapeError("predict_with_state: dimension mismatch");
  std::vector<ClassId> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    out[static_cast<std::size_t>(i)] = resolved_class(s, nearest_index(z.row(i), s.means));
  return out;
}

/// K-means initialized at shared-output-space prototypes; each cluster then
/// takes the class of the prototype nearest to its final mean.
inline ClusterState unsupervised_cluster(const Matrix& samples, const PrototypeSet& global_protos, int max_iters) {
  if (global_protos.size() == 0) throw AdaptationError("unsupervised_adapt: global prototypes missing");
  if (samples.rows() > 0 && samples.cols() != global_protos.dim())
    throw ShapeError("unsupervised_adapt: dimension mismatch");
  ClusterState s = lloyd(samples, global_protos.means, {}, max_iters);
  for (int c = 0; c < s.num_clusters(); ++c) s.cluster_class[static_cast<std::size_t>(c)] = predict(s.means.row(c), global_protos);
  return s;
}

inline std::vector<ClassId> unsupervised_adapt(const Matrix& samples, const PrototypeSet& global_protos, int max_iters) {
  return sample_classes(unsupervised_cluster(samples, global_protos, max_iters));
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the closest chosen center.
inline Matrix kmeanspp_init(const Matrix& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  if (k < 1) throw ConfigError("kmeans++: need at least one cluster");
  if (n < k) throw AdaptationError("kmeans++: fewer points than clusters");
  Matrix centers(k, points.cols());
  const auto first = rng.uniform_int(0, n - 1);
  centers.row(0) = points.row(first);
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = squared_distance(points.row(i), centers.row(0));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double d : d2) total += d;
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (target < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(0, n - 1);
    }
    centers.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<std::size_t>(i)] =
          std::min(d2[static_cast<std::size_t>(i)], squared_distance(points.row(i), centers.row(c)));
  }
  return centers;
}

}  // namespace fewshot
