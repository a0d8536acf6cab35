// Principal components of a unit's neighborhood, and the eigenvalue-based
// heuristics for choosing the number of latent variables and components.
#pragma once

#include "lpsa/data.hpp"

#include <optional>
#include <string>

namespace lpsa {

enum class EigenSolverKind {
  dense,               // LAPACK dsyevr restricted to the leading eigenpairs
  subspace_iteration,  // block power iteration from a seeded random start
};

struct EigenSolverOptions {
  EigenSolverKind kind = EigenSolverKind::dense;
  std::uint64_t seed = 0;
  int max_iterations = 20000;
  double tolerance = 1e-14;
};

struct EigenPairs {
  VectorXd values;   // descending
  MatrixXd vectors;  // unit-norm columns
};

// Leading `count` eigenpairs of a symmetric matrix. Throws NumericalError on
// solver failure.
EigenPairs leading_eigenpairs(const MatrixXd& symmetric, Index count,
                              const EigenSolverOptions& options = {});

// Gathers the T'' x K block of `x_pca` for the neighborhood members.
MatrixXd neighborhood_block(const MatrixXd& x_pca, const std::vector<Index>& members);

// Local PCA of the T'' x K block with (1/T'')F'F = I and (1/K)L'L diagonal.
// Each factor column is sign-normalized so its largest-magnitude entry is
// positive. Components with a numerically zero eigenvalue get zero loadings
// and the fit is flagged degenerate. `gram` may hold the precomputed n x n
// cross-product X''X'' of the whole panel to avoid rebuilding local Gram
// matrices. Throws DataError if d_lambda exceeds min(T'', K).
LocalFactorFit local_pca(const MatrixXd& x_pca, const Neighborhood& nbhd, Index d_lambda,
                         const EigenSolverOptions& options = {}, const MatrixXd* gram = nullptr);

// Same computation on an explicit T'' x K block.
LocalFactorFit local_pca_block(const MatrixXd& block, Index d_lambda,
                               const EigenSolverOptions& options = {},
                               const MatrixXd* local_gram = nullptr);

// Local PCA for every neighborhood, collected in unit order.
std::vector<LocalFactorFit> local_pca_all(const MatrixXd& x_pca,
                                          const std::vector<Neighborhood>& neighborhoods,
                                          Index d_lambda, int threads = 0,
                                          const EigenSolverOptions& options = {});

// F L', the estimated common component of the neighborhood block.
MatrixXd common_component(const LocalFactorFit& fit);

struct EigenDiagnostics {
  std::vector<Index> units;
  MatrixXd leading_eigenvalues;  // one row per unit, q columns
  MatrixXd gap_ratios;           // v_j / v_{j+1}, q - 1 columns
  VectorXd mean_spectrum() const;
};

// Leading q eigenvalues of (1/(T''K)) X'X for the requested neighborhoods.
EigenDiagnostics eigen_diagnostics(const MatrixXd& x_pca,
                                   const std::vector<Neighborhood>& neighborhoods,
                                   const std::vector<Index>& units, Index q);

std::string scree_csv(const EigenDiagnostics& diag);

struct LatentCountEstimate {
  std::optional<Index> d_alpha;  // empty when no gap exceeds the threshold
  VectorXd spectrum;
};

// Skips the leading (local constant) eigenvalue and counts the following
// tier of eigenvalues up to the first ratio v_j / v_{j+1} above
// `ratio_threshold`. Needs >= 3 eigenvalues and a threshold > 1.
LatentCountEstimate estimate_num_latent(const VectorXd& spectrum, double ratio_threshold = 5.0);
LatentCountEstimate estimate_num_latent(const EigenDiagnostics& diag, double ratio_threshold = 5.0);

struct FixedOrder {
  int d_alpha = 1;
  int m = 2;
};
struct BiasMinimizing {
  double threshold = 5.0;
};

struct FactorCountChoice {
  Index d_lambda = 0;
  bool capped = false;
};

// Fixed order: binomial(m - 1 + d_alpha, d_alpha) components.
// Bias minimizing: eigenvalues above threshold x median of the tail, where
// the tail is the lower half of the mean spectrum.
// The result is capped at `rank_bound` (min(T'', K)) when positive.
FactorCountChoice select_num_factors(const FixedOrder& mode, Index rank_bound = 0);
FactorCountChoice select_num_factors(const BiasMinimizing& mode, const EigenDiagnostics& diag,
                                     Index rank_bound = 0);

}  // namespace lpsa
