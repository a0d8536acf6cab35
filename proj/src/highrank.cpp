#include "lpsa/highrank.hpp"

#include "lpsa/regression.hpp"

#include <algorithm>

namespace lpsa {

namespace {

constexpr double kSingularRatio = 1e-12;

}  // namespace

MatrixXd local_subspace_residuals(const MatrixXd& series, const std::vector<Index>& matching_rows,
                                  const std::vector<Index>& pca_rows, Index k, Index d_lambda,
                                  const DistanceMetric& metric, const EigenSolverOptions& eigen, int threads) {
  const MatrixXd match = select_rows(series, matching_rows);
  const MatrixXd pca = select_rows(series, pca_rows);
  const auto neighborhoods = knn(match, k, metric, threads);
  const auto fits = local_pca_all(pca, neighborhoods, d_lambda, threads, eigen);
  MatrixXd resid(pca.rows(), pca.cols());
  parallel_for(pca.cols(), threads, [&](Index i) {
    const auto& fit = fits[static_cast<std::size_t>(i)];
    resid.col(i) = pca.col(i) - fit.factors * own_loading(neighborhoods[static_cast<std::size_t>(i)], fit);
  });
  return resid;
}

HighRankAdjustment partial_out_high_rank(const MeasurementPanel& panel, const RowSplit& split,
                                         const HighRankOptions& options) {
  if (!panel.has_high_rank()) throw DataError("high-rank adjustment needs at least one covariate");
  if (split.matching.empty() || split.pca.empty() || split.third.empty()) {
    throw DataError("high-rank adjustment needs a three-way row split");
  }
  if (options.d_lambda.empty()) throw DataError("high-rank adjustment needs component counts");
  const auto d_w = static_cast<Index>(panel.w().size());
  auto components = [&](Index eq) {
    return options.d_lambda.size() == 1 ? options.d_lambda.front()
                                        : options.d_lambda.at(static_cast<std::size_t>(eq));
  };

  HighRankAdjustment out;
  out.split = split;
  for (Index l = 0; l < d_w; ++l) {
    out.e_hat.push_back(local_subspace_residuals(panel.w()[static_cast<std::size_t>(l)], split.matching, split.pca,
                                                 options.k, components(l), options.metric, options.eigen,
                                                 options.threads));
  }
  out.u_hat = local_subspace_residuals(panel.x(), split.matching, split.pca, options.k, components(d_w),
                                       options.metric, options.eigen, options.threads);

  MatrixXd cross = MatrixXd::Zero(d_w, d_w);
  VectorXd rhs = VectorXd::Zero(d_w);
  double scale = 0.0;
  for (Index a = 0; a < d_w; ++a) {
    const auto& ea = out.e_hat[static_cast<std::size_t>(a)];
    rhs(a) = (ea.array() * out.u_hat.array()).sum();
    for (Index b = 0; b <= a; ++b) {
      cross(a, b) = (ea.array() * out.e_hat[static_cast<std::size_t>(b)].array()).sum();
      cross(b, a) = cross(a, b);
    }
    scale += select_rows(panel.w()[static_cast<std::size_t>(a)], split.pca).squaredNorm();
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cross, Eigen::EigenvaluesOnly);
  if (!(eig.eigenvalues().minCoeff() > kSingularRatio * std::max(scale, eig.eigenvalues().maxCoeff()))) {
    throw NumericalError(
        "high-rank covariates are degenerate: residual cross-product is singular after removing local factors");
  }
  out.theta = cross.ldlt().solve(rhs);

  out.residual_panel = panel.x();
  for (Index l = 0; l < d_w; ++l) out.residual_panel -= out.theta(l) * panel.w()[static_cast<std::size_t>(l)];
  return out;
}

}  // namespace lpsa
