#include "lpsa/matching.hpp"

#include "lpsa/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace lpsa {

namespace {

void check_pair(const MatrixXd& x, Index i, Index j) {
  if (i < 0 || j < 0 || i >= x.cols() || j >= x.cols()) {
    throw DataError("unit index out of range");
  }
}

double squared_gap(const MatrixXd& x, Index i, Index j) {
  double acc = 0.0;
  for (Index t = 0; t < x.rows(); ++t) {
    const double diff = x(t, i) - x(t, j);
    acc += diff * diff;
  }
  return acc;
}

MatrixXd apply_transform(const MatrixXd& x, const FeatureTransform& transform) {
  std::vector<VectorXd> features;
  features.reserve(static_cast<std::size_t>(x.cols()));
  for (Index i = 0; i < x.cols(); ++i) features.push_back(transform(x.col(i)));
  const Index dim = features.front().size();
  MatrixXd out(dim, x.cols());
  for (Index i = 0; i < x.cols(); ++i) {
    if (features[static_cast<std::size_t>(i)].size() != dim) {
      throw DataError("feature transform returned vectors of different lengths");
    }
    out.col(i) = features[static_cast<std::size_t>(i)];
  }
  return out;
}

// Distance between rows i and j of the Gram matrix, excluding i and j.
double gram_pseudo_max(const MatrixXd& gram, Index i, Index j) {
  if (i == j) return 0.0;
  double best = 0.0;
  for (Index l = 0; l < gram.cols(); ++l) {
    if (l == i || l == j) continue;
    best = std::max(best, std::abs(gram(l, i) - gram(l, j)));
  }
  return best;
}

}  // namespace

double euclidean_distance(const MatrixXd& x, Index i, Index j) {
  check_pair(x, i, j);
  if (i == j) return 0.0;
  return std::sqrt(squared_gap(x, i, j) / static_cast<double>(x.rows()));
}

double pseudo_max_distance(const MatrixXd& x, Index i, Index j) {
  check_pair(x, i, j);
  if (x.cols() < 3) {
    throw DataError("pseudo-max distance needs at least three units; use the euclidean metric");
  }
  if (i == j) return 0.0;
  const double inv_t = 1.0 / static_cast<double>(x.rows());
  double best = 0.0;
  for (Index l = 0; l < x.cols(); ++l) {
    if (l == i || l == j) continue;
    const double inner = (x.col(i) - x.col(j)).dot(x.col(l)) * inv_t;
    best = std::max(best, std::abs(inner));
  }
  return best;
}

MatrixXd pairwise_distances(const MatrixXd& x_in, const DistanceMetric& metric, int threads) {
  const MatrixXd x = metric.feature_transform ? apply_transform(x_in, metric.feature_transform) : x_in;
  const Index n = x.cols();
  MatrixXd dist = MatrixXd::Zero(n, n);

  if (metric.kind == MetricKind::euclidean) {
    const double inv_t = 1.0 / static_cast<double>(x.rows());
    parallel_for(n, threads, [&](Index i) {
      for (Index j = i + 1; j < n; ++j) dist(j, i) = std::sqrt(squared_gap(x, i, j) * inv_t);
    });
  } else {
    if (n < 3) {
      throw DataError("pseudo-max distance needs at least three units; use the euclidean metric");
    }
    const MatrixXd gram = (x.transpose() * x) / static_cast<double>(x.rows());
    parallel_for(n, threads, [&](Index i) {
      for (Index j = i + 1; j < n; ++j) dist(j, i) = gram_pseudo_max(gram, i, j);
    });
  }
  dist.triangularView<Eigen::StrictlyUpper>() = dist.transpose();
  return dist;
}

std::vector<Index> nearest_among(const MatrixXd& distances, Index query,
                                 const std::vector<Index>& candidates, Index k, double* radius) {
  if (k < 1 || k > static_cast<Index>(candidates.size())) {
    throw DataError("K = " + std::to_string(k) + " outside 1.." + std::to_string(candidates.size()));
  }
  // Self first (distance 0 by convention), then by distance, then index.
  auto key_less = [&](Index a, Index b) {
    if (a == query || b == query) return a == query && b != query;
    const double da = distances(a, query);
    const double db = distances(b, query);
    if (da != db) return da < db;
    return a < b;
  };
  std::vector<Index> order = candidates;
  std::partial_sort(order.begin(), order.begin() + k, order.end(), key_less);
  order.resize(static_cast<std::size_t>(k));
  if (radius) {
    double r = 0.0;
    for (Index m : order) {
      if (m != query) r = std::max(r, distances(m, query));
    }
    *radius = r;
  }
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<Neighborhood> knn_from_distances(const MatrixXd& distances, Index k, int threads) {
  const Index n = distances.cols();
  if (k < 1 || k > n) {
    throw DataError("K = " + std::to_string(k) + " outside 1..n = " + std::to_string(n));
  }
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index{0});
  std::vector<Neighborhood> out(static_cast<std::size_t>(n));
  parallel_for(n, threads, [&](Index i) {
    auto& nb = out[static_cast<std::size_t>(i)];
    nb.center = i;
    nb.members = nearest_among(distances, i, all, k, &nb.radius);
  });
  return out;
}

std::vector<Neighborhood> knn(const MatrixXd& x, Index k, const DistanceMetric& metric, int threads) {
  if (k < 1 || k > x.cols()) {
    throw DataError("K = " + std::to_string(k) + " outside 1..n = " + std::to_string(x.cols()));
  }
  return knn_from_distances(pairwise_distances(x, metric, threads), k, threads);
}

FiveNumberSummary summarize(const std::vector<double>& values) {
  FiveNumberSummary s;
  if (values.empty()) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {nan, nan, nan, nan, nan, nan};
  }
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  s.q1 = quantile(values, 0.25);
  s.median = quantile(values, 0.5);
  s.q3 = quantile(values, 0.75);
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  return s;
}

MatchingDiagnostics matching_diagnostics(std::vector<Neighborhood>& neighborhoods,
                                         const MatrixXd& distances, const std::vector<int>& groups) {
  const Index n = distances.cols();
  if (static_cast<Index>(neighborhoods.size()) != n) {
    throw DataError("neighborhood count does not match the distance matrix");
  }
  if (!groups.empty() && static_cast<Index>(groups.size()) != n) {
    throw DataError("group labels do not match the number of units");
  }
  MatchingDiagnostics diag;
  double sum = 0.0;
  double sum_sq = 0.0;
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  double mean = 0.0;
  for (Index j = 0; j < n; ++j) {
    for (Index i = j + 1; i < n; ++i) sum += distances(i, j);
  }
  mean = sum / pairs;
  for (Index j = 0; j < n; ++j) {
    for (Index i = j + 1; i < n; ++i) {
      const double d = distances(i, j) - mean;
      sum_sq += d * d;
    }
  }
  diag.pair_std = pairs > 1 ? std::sqrt(sum_sq / (pairs - 1.0)) : 0.0;
  diag.degenerate_std = !(diag.pair_std > 0.0);

  diag.normalized.resize(n);
  for (Index i = 0; i < n; ++i) {
    auto& nb = neighborhoods[static_cast<std::size_t>(i)];
    double value;
    if (diag.degenerate_std) {
      value = nb.radius == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
      value = nb.radius / diag.pair_std;
    }
    nb.normalized_discrepancy = value;
    diag.normalized(i) = value;
  }

  std::vector<double> all(diag.normalized.data(), diag.normalized.data() + n);
  diag.overall = summarize(all);
  if (!groups.empty()) {
    std::set<int> levels(groups.begin(), groups.end());
    for (int g : levels) {
      std::vector<double> vals;
      for (Index i = 0; i < n; ++i) {
        if (groups[static_cast<std::size_t>(i)] == g) vals.push_back(diag.normalized(i));
      }
      diag.groups.push_back(g);
      diag.by_group.push_back(summarize(vals));
    }
  }
  return diag;
}

std::string matching_table_csv(const MatchingDiagnostics& diag) {
  std::vector<std::string> header{"statistic", "all"};
  for (int g : diag.groups) header.push_back("group_" + std::to_string(g));
  CsvWriter out(header);
  const char* names[] = {"Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max."};
  auto field = [](const FiveNumberSummary& s, int row) {
    const double v[] = {s.min, s.q1, s.median, s.mean, s.q3, s.max};
    return format_double(v[row]);
  };
  for (int row = 0; row < 6; ++row) {
    std::vector<std::string> r{names[row], field(diag.overall, row)};
    for (const auto& s : diag.by_group) r.push_back(field(s, row));
    out.add_row(std::move(r));
  }
  return out.str();
}

}  // namespace lpsa
