// Brute-force reference implementations used by the tests. They share no
// code with the library beyond the data types.
#pragma once

#include "lpsa/data.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

using lpsa::Index;
using lpsa::MatrixXd;
using lpsa::VectorXd;

inline MatrixXd gaussian_matrix(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

inline double euclidean(const MatrixXd& x, Index i, Index j) {
  double acc = 0.0;
  for (Index t = 0; t < x.rows(); ++t) {
    const double d = x(t, i) - x(t, j);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(x.rows()));
}

inline double pseudo_max(const MatrixXd& x, Index i, Index j) {
  if (i == j) return 0.0;
  double best = 0.0;
  for (Index l = 0; l < x.cols(); ++l) {
    if (l == i || l == j) continue;
    double acc = 0.0;
    for (Index t = 0; t < x.rows(); ++t) acc += (x(t, i) - x(t, j)) * x(t, l);
    best = std::max(best, std::abs(acc / static_cast<double>(x.rows())));
  }
  return best;
}

// Full sort of (distance, index) pairs.
inline std::vector<Index> knn(const MatrixXd& dist, Index i, Index k) {
  std::vector<std::pair<double, Index>> all;
  for (Index j = 0; j < dist.cols(); ++j) all.emplace_back(j == i ? -1.0 : dist(i, j), j);
  std::sort(all.begin(), all.end());
  std::vector<Index> out;
  for (Index r = 0; r < k; ++r) out.push_back(all[static_cast<std::size_t>(r)].second);
  std::sort(out.begin(), out.end());
  return out;
}

struct DrValues {
  double theta = 0.0;
  double variance = 0.0;
  std::vector<double> influence;
};

// Direct summation of the doubly-robust mean of y(j) for group jp and its
// plug-in variance.
inline DrValues dr(const VectorXd& y, const std::vector<int>& s, const MatrixXd& varsigma, const MatrixXd& p,
                   int j, int jp) {
  const auto n = static_cast<std::size_t>(y.size());
  double count_jp = 0.0;
  for (std::size_t i = 0; i < n; ++i) count_jp += s[i] == jp ? 1.0 : 0.0;
  const double pj = count_jp / static_cast<double>(n);
  std::vector<double> score(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Index>(i);
    const double djp = s[i] == jp ? 1.0 : 0.0;
    const double dj = s[i] == j ? 1.0 : 0.0;
    double term = djp * varsigma(r, j) / pj;
    if (dj > 0.0) term += (p(r, jp) / pj) * (y(r) - varsigma(r, j)) / p(r, j);
    score[i] = term;
    total += term;
  }
  DrValues out;
  out.theta = total / static_cast<double>(n);
  double first = 0.0;
  double second = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Index>(i);
    const double djp = s[i] == jp ? 1.0 : 0.0;
    const double dj = s[i] == j ? 1.0 : 0.0;
    out.influence.push_back(score[i] - djp * out.theta / pj);
    const double a = djp * (varsigma(r, j) - out.theta) / pj;
    first += a * a;
    if (dj > 0.0) {
      const double b = (p(r, jp) / pj) * (y(r) - varsigma(r, j)) / p(r, j);
      second += b * b;
    }
  }
  out.variance = (first + second) / static_cast<double>(n);
  return out;
}

inline double mean(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

inline double mean(const VectorXd& v) { return v.sum() / static_cast<double>(v.size()); }

// Hand pipeline: euclidean matching on the first floor(T/2) rows, SVD of
// the neighborhood block on the remaining rows, least-squares outcome and
// propensity fits on the leading right singular vectors, clipped
// propensities, then the direct-summation estimate.
inline DrValues scripted_pipeline(const MatrixXd& x, const VectorXd& y, const std::vector<int>& s, int levels,
                                  Index k, Index d, int j, int jp, double clip = 0.01) {
  const Index periods = x.rows();
  const Index n = x.cols();
  const Index half = periods / 2;
  const MatrixXd xm = x.topRows(half);
  const MatrixXd xp = x.bottomRows(periods - half);
  MatrixXd dist(n, n);
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b) dist(a, b) = euclidean(xm, a, b);
  MatrixXd varsigma = MatrixXd::Zero(n, levels);
  MatrixXd p = MatrixXd::Zero(n, levels);
  for (Index i = 0; i < n; ++i) {
    const auto members = knn(dist, i, k);
    MatrixXd block(xp.rows(), k);
    Index own = 0;
    for (Index c = 0; c < k; ++c) {
      block.col(c) = xp.col(members[static_cast<std::size_t>(c)]);
      if (members[static_cast<std::size_t>(c)] == i) own = c;
    }
    Eigen::JacobiSVD<MatrixXd> svd(block, Eigen::ComputeFullV);
    const MatrixXd v = svd.matrixV().leftCols(d);
    auto fit = [&](bool eligible_only, int level, bool indicator) {
      std::vector<Index> rows;
      for (Index c = 0; c < k; ++c) {
        const int lab = s[static_cast<std::size_t>(members[static_cast<std::size_t>(c)])];
        if (!eligible_only || lab == level) rows.push_back(c);
      }
      const auto used = static_cast<Index>(rows.size());
      VectorXd resp(used);
      MatrixXd design(used, d);
      for (Index r = 0; r < used; ++r) {
        const Index unit = members[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
        resp(r) = indicator ? (s[static_cast<std::size_t>(unit)] == level ? 1.0 : 0.0) : y(unit);
        design.row(r) = v.row(rows[static_cast<std::size_t>(r)]);
      }
      if (used < d) return resp.mean();
      const VectorXd coef = design.colPivHouseholderQr().solve(resp);
      return static_cast<double>(v.row(own).dot(coef));
    };
    for (int l = 0; l < levels; ++l) {
      bool observed = false;
      for (Index c = 0; c < k; ++c) observed = observed || s[static_cast<std::size_t>(members[static_cast<std::size_t>(c)])] == l;
      varsigma(i, l) = observed ? fit(true, l, false) : 0.0;
      p(i, l) = std::clamp(fit(false, l, true), clip, 1.0 - clip);
    }
  }
  return dr(y, s, varsigma, p, j, jp);
}

}  // namespace oracle
