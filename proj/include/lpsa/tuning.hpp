// Choice of the number of nearest neighbors K: cross-validation and the
// direct plug-in rule.
#pragma once

#include "lpsa/pipeline.hpp"

#include <string>
#include <utility>

namespace lpsa {

enum class TuningMethod { cv, dpi };

struct TuningResult {
  TuningMethod method = TuningMethod::cv;
  Index k_selected = 0;
  std::vector<std::pair<Index, double>> criterion_curve;
  Index k_initial = 0;             // dpi only
  double sum_variance = 0.0;       // dpi only
  double sum_bias = 0.0;           // dpi only
  std::vector<std::string> warnings;
};

// Matching/PCA settings shared by both selectors; `extraction.k` is ignored.
struct TuningSetup {
  ExtractionConfig extraction;
  NuisanceConfig nuisance;
};

// Fold label of every unit observed at `level`; -1 elsewhere. Uniform
// random assignment from `seed` with fold sizes differing by at most one.
std::vector<int> assign_folds(const TreatmentSample& sample, int level, int n_folds, std::uint64_t seed);

// Out-of-fold predictions of the level-j outcome mean with K neighbors
// drawn from units outside the held-out fold. NaN for units not at level j.
// Throws DataError when K exceeds a training pool.
VectorXd cv_predictions(const MeasurementPanel& panel, const TreatmentSample& sample, int level, Index k,
                        const std::vector<int>& folds, const TuningSetup& setup);

// Candidates larger than a training pool are skipped with a warning;
// DataError when every candidate is skipped. Ties go to the smaller K.
TuningResult cross_validate_k(const MeasurementPanel& panel, const TreatmentSample& sample, int level,
                              std::vector<Index> k_candidates, int n_folds, std::uint64_t seed,
                              const TuningSetup& setup);

// {0.5, 1, 1.5, 2} x n^{2m/(2m + d_alpha)}, rounded, deduplicated.
std::vector<Index> default_k_candidates(Index n, int d_alpha, int m);

enum class BiasProxy {
  polynomial,        // degree-m monomials of the leading non-constant loadings
  extra_components,  // the next loadings of the local PCA
};

struct DpiOptions {
  int d_alpha = 1;
  int m = 2;
  BiasProxy proxy = BiasProxy::polynomial;
};

// The update round((d_alpha V / (2m B))^{d_alpha/(2m+d_alpha)} K_initial),
// capped to [lower, upper]. Returns `upper` when bias_sum is zero.
Index dpi_update(double variance_sum, double bias_sum, Index k_initial, int d_alpha, int m, Index lower,
                 Index upper);

// Pilot fit at K_initial with d_lambda = binomial(m - 1 + d_alpha, d_alpha),
// per-unit least-squares variances and bias proxies summed over level-j
// units, then dpi_update capped to [d_z + d_lambda + 1, n].
TuningResult dpi_k(const MeasurementPanel& panel, const TreatmentSample& sample, int level, Index k_initial,
                   const DpiOptions& options, const TuningSetup& setup);

std::string criterion_curve_csv(const TuningResult& result);

}  // namespace lpsa
