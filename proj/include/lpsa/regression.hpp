// Factor-augmented local regressions producing the outcome means and
// propensity scores for each unit and treatment level.
//
// For unit i the design uses the neighbors l in N_i with regressors
// (z_l, [1], loading of l in the local PCA of N_i). The outcome regression
// for level j keeps only neighbors observed at level j; the propensity
// regression uses every neighbor.
#pragma once

#include "lpsa/data.hpp"

#include <optional>

namespace lpsa {

enum FitFlag : unsigned {
  kFitNone = 0,
  kFitRidge = 1u << 0,          // ridge guard added to singular normal equations
  kFitLocalAverage = 1u << 1,   // too few eligible rows, fell back to a local average
  kFitQmleFallback = 1u << 2,   // logit did not converge or separated
  kFitClipped = 1u << 3,        // propensity clipped into [clip, 1 - clip]
};

struct LocalFitRecord {
  Index unit = 0;
  int level = 0;
  VectorXd beta;          // coefficients on controls
  VectorXd b;             // coefficients on local loadings
  double intercept = 0.0; // only when RegressionOptions::add_intercept
  double fitted = 0.0;
  double unclipped = 0.0;
  Index n_used = 0;
  unsigned flags = kFitNone;
};

enum class PropensityBackend { local_ls, local_average, local_logit };
enum class Link { identity, logit };

struct RegressionOptions {
  bool add_intercept = false;
  double p_clip = 0.01;
  int max_iterations = 100;
  double tolerance = 1e-8;
  int threads = 0;
};

// Which observations and what response a local design uses.
enum class Response { outcome, indicator };

struct LocalDesign {
  MatrixXd x;       // rows: used neighbors; cols: [z, 1?, loadings, extra]
  VectorXd y;
  VectorXd target;  // regressor row of the unit being predicted
  std::vector<Index> rows;  // neighbor units used, in member order
  Index z_cols = 0;
  bool intercept = false;
  Index loading_cols = 0;
};

// Builds the design for a unit. `loadings` rows follow `members`;
// `target_loading` is the unit's own loading row. `extra`/`extra_target`
// append regressors (bias proxies in the plug-in K selector).
LocalDesign build_local_design(const TreatmentSample& sample, const std::vector<Index>& members,
                               const MatrixXd& loadings, const VectorXd& target_loading, Index unit,
                               int level, Response response, bool eligible_only, bool add_intercept,
                               const MatrixXd* extra = nullptr, const VectorXd* extra_target = nullptr);

struct LeastSquaresSolution {
  VectorXd coef;
  bool ridge = false;
};

// Normal equations with a ridge of 1e-10 * trace / dim added only when the
// Gram matrix is numerically singular. Empty optional when every regressor
// is identically zero.
std::optional<LeastSquaresSolution> solve_least_squares(const MatrixXd& x, const VectorXd& y);

struct QmleSolution {
  VectorXd coef;
  bool converged = false;
  bool ridge = false;
  int iterations = 0;
};

// Newton-Raphson on the logit quasi-score X'(y - logistic(X c)).
QmleSolution solve_logit_qmle(const MatrixXd& x, const VectorXd& y, int max_iterations, double tolerance);

double logistic(double eta);

// Fit for one unit from an explicit design.
LocalFitRecord fit_design(const LocalDesign& design, Index unit, int level, Link link, bool average_only,
                          const RegressionOptions& options);

// Loading row of `unit` inside the neighborhood fit (unit must be a member).
VectorXd own_loading(const Neighborhood& nbhd, const LocalFactorFit& fit);

std::vector<LocalFitRecord> fit_outcome_local_ls(const TreatmentSample& sample,
                                                 const std::vector<Neighborhood>& neighborhoods,
                                                 const std::vector<LocalFactorFit>& fits, int level,
                                                 const RegressionOptions& options = {});

// Mean outcome of the level-j neighbors (the local constant estimator).
std::vector<LocalFitRecord> fit_outcome_local_average(const TreatmentSample& sample,
                                                      const std::vector<Neighborhood>& neighborhoods,
                                                      int level, const RegressionOptions& options = {});

std::vector<LocalFitRecord> fit_propensity(const TreatmentSample& sample,
                                           const std::vector<Neighborhood>& neighborhoods,
                                           const std::vector<LocalFactorFit>& fits, int level,
                                           PropensityBackend backend, const RegressionOptions& options = {});

// Local quasi-likelihood fit of the outcome for level j. The identity link
// reduces to fit_outcome_local_ls.
std::vector<LocalFitRecord> local_qmle(const TreatmentSample& sample,
                                       const std::vector<Neighborhood>& neighborhoods,
                                       const std::vector<LocalFactorFit>& fits, int level, Link link,
                                       const RegressionOptions& options = {});

std::string fit_dump_csv(const std::vector<LocalFitRecord>& records, const std::string& kind);

}  // namespace lpsa
