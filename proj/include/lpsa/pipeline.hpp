// End-to-end composition: latent extraction (split, match, local PCA, and
// optional high-rank partialling), nuisance fits, and doubly-robust
// estimates.
#pragma once

#include "lpsa/data.hpp"
#include "lpsa/estimators.hpp"
#include "lpsa/highrank.hpp"
#include "lpsa/local_pca.hpp"
#include "lpsa/matching.hpp"
#include "lpsa/regression.hpp"

#include <optional>

namespace lpsa {

enum class SplitMode { none, random, contiguous_halves };
enum class OutcomeBackend { local_ls, local_average, local_logit };

struct ExtractionConfig {
  DistanceMetric metric;
  SplitMode split = SplitMode::contiguous_halves;
  std::uint64_t split_seed = 0;
  Index k = 0;
  Index d_lambda = 1;  // 0 skips local PCA (local constant estimation)
  EigenSolverOptions eigen;
  bool high_rank = false;  // ignored when the panel carries no covariates
  Index high_rank_k = 0;   // 0 reuses k
  std::vector<Index> high_rank_d_lambda;  // empty reuses d_lambda
  int threads = 0;
};

struct Extraction {
  std::optional<RowSplit> split;
  MatrixXd matching_rows;  // panel rows used for matching
  MatrixXd pca_rows;       // panel rows used for local PCA
  MatrixXd distances;
  std::vector<Neighborhood> neighborhoods;
  std::vector<LocalFactorFit> fits;  // empty when d_lambda == 0
  std::optional<HighRankAdjustment> high_rank;
};

Extraction extract_latent(const MeasurementPanel& panel, const ExtractionConfig& config);

struct NuisanceConfig {
  OutcomeBackend outcome = OutcomeBackend::local_ls;
  PropensityBackend propensity = PropensityBackend::local_ls;
  RegressionOptions regression;
};

struct NuisanceResult {
  NuisanceFits fits;
  std::vector<LocalFitRecord> outcome_records;
  std::vector<LocalFitRecord> propensity_records;
};

// Fits outcome means and propensities for every requested level.
NuisanceResult fit_nuisance(const TreatmentSample& sample, const Extraction& extraction,
                            const std::vector<int>& levels, const NuisanceConfig& config);

std::vector<LocalFitRecord> fit_outcome(const TreatmentSample& sample, const Extraction& extraction, int level,
                                        const NuisanceConfig& config);

// Outcome refit closure for distribution regressions on the same
// neighborhoods and loadings.
OutcomeRefit make_outcome_refit(const Extraction& extraction, const NuisanceConfig& config);

}  // namespace lpsa
