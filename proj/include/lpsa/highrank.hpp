// Removes the linear effect of high-rank covariates from the measurements
// before latent-variable extraction.
#pragma once

#include "lpsa/data.hpp"
#include "lpsa/local_pca.hpp"
#include "lpsa/matching.hpp"

namespace lpsa {

struct HighRankAdjustment {
  VectorXd theta;                  // one slope per covariate
  MatrixXd residual_panel;         // x - sum_l w_l theta_l, all T rows
  std::vector<MatrixXd> e_hat;     // covariate residuals on the PCA rows, |T2| x n each
  MatrixXd u_hat;                  // measurement residuals on the PCA rows
  RowSplit split;                  // T1 / T2 / T3
};

struct HighRankOptions {
  Index k = 0;
  // Components per equation: entries 0..d_w-1 for the covariates, the last
  // for x. A single entry applies to every equation.
  std::vector<Index> d_lambda{1};
  DistanceMetric metric;
  EigenSolverOptions eigen;
  int threads = 0;
};

// Matching on split.matching (T1) and local PCA on split.pca (T2) for every
// covariate and for x; the pooled regression of x residuals on covariate
// residuals over all (i, t in T2) gives theta. Throws NumericalError when the
// pooled residual cross-product is singular.
HighRankAdjustment partial_out_high_rank(const MeasurementPanel& panel, const RowSplit& split,
                                         const HighRankOptions& options);

// Residuals of one series after local principal subspace approximation:
// rows of `series` in `pca_rows` minus each unit's fitted common component.
MatrixXd local_subspace_residuals(const MatrixXd& series, const std::vector<Index>& matching_rows,
                                  const std::vector<Index>& pca_rows, Index k, Index d_lambda,
                                  const DistanceMetric& metric, const EigenSolverOptions& eigen, int threads);

}  // namespace lpsa
