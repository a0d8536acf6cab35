// Distances between measurement columns and exact K-nearest-neighbor search.
#pragma once

#include "lpsa/data.hpp"

#include <functional>
#include <optional>

namespace lpsa {

enum class MetricKind { euclidean, pseudo_max };

// Optional per-unit feature map applied to a measurement column before the
// metric is evaluated. No transform is shipped; callers supply their own.
using FeatureTransform = std::function<VectorXd(const VectorXd&)>;

struct DistanceMetric {
  MetricKind kind = MetricKind::euclidean;
  FeatureTransform feature_transform;
};

// (1/sqrt(T)) ||x_i - x_j||_2 over the rows of `x`.
double euclidean_distance(const MatrixXd& x, Index i, Index j);

// max over l != i, j of |(1/T) (x_i - x_j)' x_l|. Needs n >= 3; returns 0
// for i == j. Throws DataError when fewer than three columns exist.
double pseudo_max_distance(const MatrixXd& x, Index i, Index j);

// Symmetric n x n matrix of distances with a zero diagonal. The pseudo-max
// metric is evaluated through the Gram matrix (1/T) X'X, computed once.
MatrixXd pairwise_distances(const MatrixXd& x, const DistanceMetric& metric, int threads = 0);

// K nearest neighbors of every unit, unit itself included. Ties prefer the
// smaller unit index. Throws DataError unless 1 <= K <= n.
std::vector<Neighborhood> knn(const MatrixXd& x, Index k, const DistanceMetric& metric,
                              int threads = 0);
std::vector<Neighborhood> knn_from_distances(const MatrixXd& distances, Index k, int threads = 0);

// K nearest units to `query` among `candidates` (query excluded unless it is
// itself a candidate). Returned indices are ascending; `radius` receives the
// largest selected distance.
std::vector<Index> nearest_among(const MatrixXd& distances, Index query,
                                 const std::vector<Index>& candidates, Index k,
                                 double* radius = nullptr);

struct FiveNumberSummary {
  double min = 0, q1 = 0, median = 0, mean = 0, q3 = 0, max = 0;
};

struct MatchingDiagnostics {
  VectorXd normalized;          // radius_i / std of off-diagonal distances
  double pair_std = 0.0;
  bool degenerate_std = false;  // all pairwise distances equal
  std::vector<int> groups;      // treatment levels present, ascending
  std::vector<FiveNumberSummary> by_group;
  FiveNumberSummary overall;
};

// `groups` assigns a treatment level to each unit (may be empty). The std is
// the sample standard deviation over the n(n-1)/2 off-diagonal pairs.
MatchingDiagnostics matching_diagnostics(std::vector<Neighborhood>& neighborhoods,
                                         const MatrixXd& distances,
                                         const std::vector<int>& groups = {});

// Min., 1st Qu., Median, Mean, 3rd Qu., Max. rows per group.
std::string matching_table_csv(const MatchingDiagnostics& diag);

FiveNumberSummary summarize(const std::vector<double>& values);

}  // namespace lpsa
