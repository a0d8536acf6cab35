#include "lpsa/pipeline.hpp"

#include <set>

namespace lpsa {

Extraction extract_latent(const MeasurementPanel& panel, const ExtractionConfig& config) {
  Extraction out;
  MatrixXd x = panel.x();
  const Index periods = panel.periods();

  if (config.high_rank && panel.has_high_rank()) {
    const RowSplit thirds = make_row_split(periods, SplitScheme::thirds, config.split_seed);
    HighRankOptions options;
    options.k = config.high_rank_k > 0 ? config.high_rank_k : config.k;
    options.d_lambda = config.high_rank_d_lambda.empty() ? std::vector<Index>{std::max<Index>(config.d_lambda, 1)}
                                                         : config.high_rank_d_lambda;
    options.metric = config.metric;
    options.eigen = config.eigen;
    options.threads = config.threads;
    out.high_rank = partial_out_high_rank(panel, thirds, options);
    out.split = RowSplit{thirds.pca, thirds.third, {}};
    x = out.high_rank->residual_panel;
  } else if (config.split == SplitMode::random) {
    out.split = make_row_split(periods, SplitScheme::random, config.split_seed);
  } else if (config.split == SplitMode::contiguous_halves) {
    out.split = make_row_split(periods, SplitScheme::contiguous_halves);
  }

  if (out.split) {
    out.matching_rows = select_rows(x, out.split->matching);
    out.pca_rows = select_rows(x, out.split->pca);
  } else {
    out.matching_rows = x;
    out.pca_rows = x;
  }

  out.distances = pairwise_distances(out.matching_rows, config.metric, config.threads);
  out.neighborhoods = knn_from_distances(out.distances, config.k, config.threads);
  if (config.d_lambda > 0) {
    out.fits = local_pca_all(out.pca_rows, out.neighborhoods, config.d_lambda, config.threads, config.eigen);
  }
  return out;
}

std::vector<LocalFitRecord> fit_outcome(const TreatmentSample& sample, const Extraction& extraction, int level,
                                        const NuisanceConfig& config) {
  if (config.outcome != OutcomeBackend::local_average && extraction.fits.empty()) {
    throw DataError("factor-augmented outcome regression needs d_lambda >= 1");
  }
  switch (config.outcome) {
    case OutcomeBackend::local_average:
      return fit_outcome_local_average(sample, extraction.neighborhoods, level, config.regression);
    case OutcomeBackend::local_logit:
      return local_qmle(sample, extraction.neighborhoods, extraction.fits, level, Link::logit, config.regression);
    case OutcomeBackend::local_ls:
      break;
  }
  return fit_outcome_local_ls(sample, extraction.neighborhoods, extraction.fits, level, config.regression);
}

NuisanceResult fit_nuisance(const TreatmentSample& sample, const Extraction& extraction,
                            const std::vector<int>& levels, const NuisanceConfig& config) {
  if (config.propensity != PropensityBackend::local_average && extraction.fits.empty()) {
    throw DataError("factor-augmented propensity regression needs d_lambda >= 1");
  }
  NuisanceResult out;
  out.fits = make_nuisance(sample);
  const std::set<int> unique(levels.begin(), levels.end());
  for (int level : unique) {
    sample.require_level(level);
    auto outcome = fit_outcome(sample, extraction, level, config);
    store_outcome_fits(out.fits, outcome);
    out.outcome_records.insert(out.outcome_records.end(), outcome.begin(), outcome.end());
    auto propensity =
        fit_propensity(sample, extraction.neighborhoods, extraction.fits, level, config.propensity, config.regression);
    store_propensity_fits(out.fits, propensity);
    out.propensity_records.insert(out.propensity_records.end(), propensity.begin(), propensity.end());
  }
  return out;
}

OutcomeRefit make_outcome_refit(const Extraction& extraction, const NuisanceConfig& config) {
  NuisanceConfig single = config;
  single.regression.threads = 1;
  return [&extraction, single](const TreatmentSample& transformed, int level) {
    return fit_outcome(transformed, extraction, level, single);
  };
}

}  // namespace lpsa
