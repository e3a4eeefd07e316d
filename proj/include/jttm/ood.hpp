#pragma once

// Class-conditional Mahalanobis outlier detection: per-class Gaussian
// statistics with an MLE covariance, distances via a Cholesky solve, and a
// chi-squared filter that splits scored examples into in-distribution and
// out-of-distribution sets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jttm/dataset.hpp"
#include "jttm/special.hpp"

namespace jttm {

struct FeaturePoint {
  std::int64_t id = 0;
  Vec features;
  int label = 0;
};

struct ClassGaussian {
  int label = -1;
  Vec mean;          // h
  Vec covariance;    // row-major h x h, unregularized MLE (divisor n)
  Vec factor;        // lower-triangular Cholesky factor of the regularized covariance
  double ridge = 0;  // value actually added to the diagonal
  std::int64_t count = 0;

  int dim() const { return static_cast<int>(mean.size()); }
};

struct OodScore {
  double m = 0;   // Mahalanobis distance
  double m2 = 0;  // squared distance
  double p = 0;   // upper-tail p-value of the filter statistic
};

struct OodPartition {
  std::vector<std::int64_t> s_in;   // sorted
  std::vector<std::int64_t> s_out;  // sorted
  std::map<std::int64_t, OodScore> scores;
};

struct OodOptions {
  // Compare the squared distance against the chi-squared distribution (the
  // squared Mahalanobis distance of a Gaussian vector is chi-squared); set
  // false to compare the unsquared distance for ablation.
  bool squared_statistic = true;
  // An example is OOD when its upper-tail p-value is small (large distance).
  // Set false for the inverted reading, kept only for documentation.
  bool ood_if_small_p = true;
};

// ---------------------------------------------------------------------------
// Dense linear algebra on row-major h x h matrices

namespace detail {

// In-place lower Cholesky A = L L^T. Returns false when A is not positive
// definite (within floating point).
inline bool cholesky_lower(int n, const Vec& a, Vec& l) {
  l.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double sum = a[static_cast<std::size_t>(i) * n + j];
      for (int k = 0; k < j; ++k) {
        sum -= l[static_cast<std::size_t>(i) * n + k] * l[static_cast<std::size_t>(j) * n + k];
      }
      if (i == j) {
        if (!(sum > 0.0) || !std::isfinite(sum)) return false;
        l[static_cast<std::size_t>(i) * n + j] = std::sqrt(sum);
      } else {
        l[static_cast<std::size_t>(i) * n + j] = sum / l[static_cast<std::size_t>(j) * n + j];
      }
    }
  }
  return true;
}

// Solves L z = b by forward substitution.
inline void forward_solve(int n, const Vec& l, const Vec& b, Vec& z) {
  z.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double sum = b[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k) {
      sum -= l[static_cast<std::size_t>(i) * n + k] * z[static_cast<std::size_t>(k)];
    }
    z[static_cast<std::size_t>(i)] = sum / l[static_cast<std::size_t>(i) * n + i];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Class statistics

// Per class: arithmetic mean and the maximum-likelihood covariance
// (divisor n), regularized with eps * (trace/h) * I, eps = 1e-6, before the
// Cholesky factorization. Throws when a class has fewer than two examples or
// its regularized covariance is not positive definite.
inline std::vector<ClassGaussian> fit_class_gaussians(std::span<const FeaturePoint> points) {
  constexpr double kRidgeEps = 1e-6;
  if (points.empty()) throw std::invalid_argument("fit_class_gaussians: no points");
  const int h = static_cast<int>(points.front().features.size());
  int num_classes = 0;
  for (const FeaturePoint& p : points) {
    if (p.label < 0) throw std::invalid_argument("fit_class_gaussians: negative label");
    if (static_cast<int>(p.features.size()) != h) {
      throw std::invalid_argument("fit_class_gaussians: inconsistent feature dimension");
    }
    num_classes = std::max(num_classes, p.label + 1);
  }

  std::vector<ClassGaussian> gaussians(static_cast<std::size_t>(num_classes));
  for (int y = 0; y < num_classes; ++y) {
    ClassGaussian& g = gaussians[static_cast<std::size_t>(y)];
    g.label = y;
    g.mean.assign(static_cast<std::size_t>(h), 0.0);
  }
  for (const FeaturePoint& p : points) {
    ClassGaussian& g = gaussians[static_cast<std::size_t>(p.label)];
    ++g.count;
    for (int j = 0; j < h; ++j) g.mean[static_cast<std::size_t>(j)] += p.features[static_cast<std::size_t>(j)];
  }
  for (ClassGaussian& g : gaussians) {
    if (g.count < 2) {
      throw std::runtime_error("fit_class_gaussians: class " + std::to_string(g.label) +
                               " has fewer than 2 examples");
    }
    for (double& v : g.mean) v /= static_cast<double>(g.count);
    g.covariance.assign(static_cast<std::size_t>(h) * h, 0.0);
  }
  Vec centered(static_cast<std::size_t>(h));
  for (const FeaturePoint& p : points) {
    ClassGaussian& g = gaussians[static_cast<std::size_t>(p.label)];
    for (int j = 0; j < h; ++j) {
      centered[static_cast<std::size_t>(j)] =
          p.features[static_cast<std::size_t>(j)] - g.mean[static_cast<std::size_t>(j)];
    }
    for (int i = 0; i < h; ++i) {
      const double ci = centered[static_cast<std::size_t>(i)];
      for (int j = 0; j <= i; ++j) {
        g.covariance[static_cast<std::size_t>(i) * h + j] += ci * centered[static_cast<std::size_t>(j)];
      }
    }
  }
  for (ClassGaussian& g : gaussians) {
    const double inv_n = 1.0 / static_cast<double>(g.count);
    double trace = 0.0;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j <= i; ++j) {
        const double v = g.covariance[static_cast<std::size_t>(i) * h + j] * inv_n;
        g.covariance[static_cast<std::size_t>(i) * h + j] = v;
        g.covariance[static_cast<std::size_t>(j) * h + i] = v;
      }
      trace += g.covariance[static_cast<std::size_t>(i) * h + i];
    }
    g.ridge = kRidgeEps * trace / static_cast<double>(h);
    Vec regularized = g.covariance;
    for (int i = 0; i < h; ++i) regularized[static_cast<std::size_t>(i) * h + i] += g.ridge;
    if (!detail::cholesky_lower(h, regularized, g.factor)) {
      double max_diag = 0.0;
      double min_diag = std::numeric_limits<double>::infinity();
      for (int i = 0; i < h; ++i) {
        const double d = regularized[static_cast<std::size_t>(i) * h + i];
        max_diag = std::max(max_diag, d);
        min_diag = std::min(min_diag, d);
      }
      throw std::runtime_error(
          "fit_class_gaussians: regularized covariance for class " + std::to_string(g.label) +
          " is not positive definite (diagonal condition estimate " + std::to_string(max_diag) +
          " / " + std::to_string(min_diag) + ")");
    }
  }
  return gaussians;
}

// ---------------------------------------------------------------------------
// Mahalanobis distance

// sqrt((x - mu)^T Sigma^-1 (x - mu)), computed as the Euclidean norm of the
// forward-substitution solve L z = x - mu.
inline double mahalanobis(const Vec& x, const ClassGaussian& g) {
  const int h = g.dim();
  if (static_cast<int>(x.size()) != h) {
    throw std::invalid_argument("mahalanobis: dimension mismatch");
  }
  Vec residual(static_cast<std::size_t>(h));
  for (int j = 0; j < h; ++j) {
    residual[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)] - g.mean[static_cast<std::size_t>(j)];
  }
  Vec z;
  detail::forward_solve(h, g.factor, residual, z);
  double sum = 0.0;
  for (const double v : z) sum += v * v;
  return std::sqrt(sum);
}

// ---------------------------------------------------------------------------
// Partition

// Scores every example against its annotated class's Gaussian and assigns it
// to s_out iff its upper-tail p-value falls below alpha (equivalently, its
// statistic exceeds chi2_upper_quantile(df, alpha)).
inline OodPartition partition_ood(std::span<const FeaturePoint> points,
                                  std::span<const ClassGaussian> gaussians, int df, double alpha,
                                  const OodOptions& options = {}) {
  if (df < 1) throw std::invalid_argument("partition_ood: df must be a positive integer");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("partition_ood: alpha must lie in (0, 1)");
  std::map<int, const ClassGaussian*> by_label;
  for (const ClassGaussian& g : gaussians) by_label[g.label] = &g;

  OodPartition partition;
  for (const FeaturePoint& point : points) {
    const auto it = by_label.find(point.label);
    if (it == by_label.end()) {
      throw std::runtime_error("partition_ood: no fitted Gaussian for class " +
                               std::to_string(point.label));
    }
    OodScore score;
    score.m = mahalanobis(point.features, *it->second);
    score.m2 = score.m * score.m;
    const double statistic = options.squared_statistic ? score.m2 : score.m;
    score.p = chi2_upper_tail(df, statistic);
    const bool out = options.ood_if_small_p ? (score.p < alpha) : (score.p >= alpha);
    (out ? partition.s_out : partition.s_in).push_back(point.id);
    partition.scores[point.id] = score;
  }
  std::sort(partition.s_in.begin(), partition.s_in.end());
  std::sort(partition.s_out.begin(), partition.s_out.end());
  return partition;
}

// ---------------------------------------------------------------------------
// Error-set pruning

// error_ids minus s_out. Every error id must have been scored.
inline ErrorSet prune_error_set(const ErrorSet& error_ids, const OodPartition& partition) {
  for (const std::int64_t id : error_ids.ids) {
    if (partition.scores.find(id) == partition.scores.end()) {
      throw std::invalid_argument("prune_error_set: error id " + std::to_string(id) +
                                  " is not covered by the partition");
    }
  }
  ErrorSet pruned;
  std::set_difference(error_ids.ids.begin(), error_ids.ids.end(), partition.s_out.begin(),
                      partition.s_out.end(), std::back_inserter(pruned.ids));
  return pruned;
}

// ---------------------------------------------------------------------------
// Score export for downstream audit of removed examples

inline void save_scores(const OodPartition& partition, const std::map<std::int64_t, int>& labels,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_scores: cannot open " + path.string());
  for (const auto& [id, score] : partition.scores) {
    nlohmann::json j;
    j["id"] = id;
    j["label"] = labels.at(id);
    j["m"] = score.m;
    j["m2"] = score.m2;
    j["p"] = score.p;
    j["set"] = std::binary_search(partition.s_out.begin(), partition.s_out.end(), id) ? "out" : "in";
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_scores: write failed for " + path.string());
}

inline void save_scores(const OodPartition& partition, std::span<const FeaturePoint> points,
                        const std::filesystem::path& path) {
  std::map<std::int64_t, int> labels;
  for (const FeaturePoint& p : points) labels[p.id] = p.label;
  save_scores(partition, labels, path);
}

}  // namespace jttm
