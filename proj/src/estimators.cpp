#include "lpsa/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace lpsa {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

void require_fitted(double value, const char* what, Index unit, int level) {
  if (!std::isfinite(value)) {
    throw DataError(std::string(what) + " for unit " + std::to_string(unit) + " at level " +
                    std::to_string(level) + " has not been fitted");
  }
}

Interval normal_interval(double theta, double sigma, Index n) {
  const double half = kNormalQuantile975 * sigma / std::sqrt(static_cast<double>(n));
  return {theta - half, theta + half};
}

}  // namespace

NuisanceFits make_nuisance(const TreatmentSample& sample) {
  const Index n = sample.size();
  const int levels = sample.num_levels();
  NuisanceFits fits;
  fits.varsigma = MatrixXd::Constant(n, levels, kNan);
  fits.p = MatrixXd::Constant(n, levels, kNan);
  fits.p_unclipped = MatrixXd::Constant(n, levels, kNan);
  fits.p_marginal.resize(levels);
  for (int j = 0; j < levels; ++j) {
    fits.p_marginal(j) = static_cast<double>(sample.count(j)) / static_cast<double>(n);
  }
  return fits;
}

void store_outcome_fits(NuisanceFits& nuisance, const std::vector<LocalFitRecord>& records) {
  for (const auto& r : records) nuisance.varsigma(r.unit, r.level) = r.fitted;
}

void store_propensity_fits(NuisanceFits& nuisance, const std::vector<LocalFitRecord>& records) {
  for (const auto& r : records) {
    nuisance.p(r.unit, r.level) = r.fitted;
    nuisance.p_unclipped(r.unit, r.level) = r.unclipped;
  }
}

DrEstimate dr_counterfactual_mean(const TreatmentSample& sample, const NuisanceFits& nuisance, int level,
                                  int group) {
  sample.require_level(level);
  sample.require_level(group);
  const Index n = sample.size();
  if (nuisance.varsigma.rows() != n || nuisance.p.rows() != n) {
    throw DataError("nuisance fits do not match the sample size");
  }
  const double p_group = nuisance.p_marginal(group);
  if (!(p_group > 0.0)) throw DataError("estimand undefined: no units in group " + std::to_string(group));

  VectorXd score(n);
  Index at_level = 0;
  Index clipped = 0;
  for (Index i = 0; i < n; ++i) {
    const double in_group = sample.d(i, group);
    const double at_j = sample.d(i, level);
    double value = 0.0;
    if (in_group == 1.0) {
      require_fitted(nuisance.varsigma(i, level), "outcome mean", i, level);
      value += nuisance.varsigma(i, level) / p_group;
    }
    if (at_j == 1.0) {
      const double varsigma = nuisance.varsigma(i, level);
      require_fitted(varsigma, "outcome mean", i, level);
      require_fitted(nuisance.p(i, level), "propensity", i, level);
      require_fitted(nuisance.p(i, group), "propensity", i, group);
      value += (nuisance.p(i, group) / p_group) * (sample.y()(i) - varsigma) / nuisance.p(i, level);
      ++at_level;
      if (nuisance.p_unclipped(i, level) != nuisance.p(i, level)) ++clipped;
    }
    score(i) = value;
  }

  DrEstimate est;
  est.level = level;
  est.group = group;
  est.theta = score.mean();
  est.influence.resize(n);
  for (Index i = 0; i < n; ++i) {
    est.influence(i) = score(i) - sample.d(i, group) * est.theta / p_group;
  }
  est.sigma = std::sqrt(dr_variance(sample, nuisance, est.theta, level, group));
  est.ci95 = normal_interval(est.theta, est.sigma, n);
  est.sample_fingerprint = sample.fingerprint();
  est.clipped_share = at_level > 0 ? static_cast<double>(clipped) / static_cast<double>(at_level) : 0.0;
  est.clipping_warning = est.clipped_share >= kClippingWarningShare;
  return est;
}

double dr_variance(const TreatmentSample& sample, const NuisanceFits& nuisance, double theta, int level,
                   int group) {
  sample.require_level(level);
  sample.require_level(group);
  const Index n = sample.size();
  const double p_group = nuisance.p_marginal(group);
  if (!(p_group > 0.0)) throw DataError("estimand undefined: no units in group " + std::to_string(group));
  const double p2 = p_group * p_group;
  double regression_term = 0.0;
  double weighting_term = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (sample.d(i, group) == 1.0) {
      const double gap = nuisance.varsigma(i, level) - theta;
      require_fitted(gap, "outcome mean", i, level);
      regression_term += gap * gap / p2;
    }
    if (sample.d(i, level) == 1.0) {
      const double resid = sample.y()(i) - nuisance.varsigma(i, level);
      const double ratio = nuisance.p(i, group) / nuisance.p(i, level);
      require_fitted(resid * ratio, "propensity", i, level);
      weighting_term += ratio * ratio * resid * resid / p2;
    }
  }
  return regression_term / static_cast<double>(n) + weighting_term / static_cast<double>(n);
}

DrEstimate treatment_effect(const DrEstimate& a, const DrEstimate& b) {
  if (a.sample_fingerprint != b.sample_fingerprint || a.influence.size() != b.influence.size()) {
    throw DataError("treatment effect requires estimates from the same sample");
  }
  if (a.group != b.group) throw DataError("treatment effect requires a shared conditioning group");
  DrEstimate out;
  out.level = a.level;
  out.group = a.group;
  out.theta = a.theta - b.theta;
  out.influence = a.influence - b.influence;
  out.sigma = std::sqrt(out.influence.squaredNorm() / static_cast<double>(out.influence.size()));
  out.ci95 = normal_interval(out.theta, out.sigma, out.influence.size());
  out.sample_fingerprint = a.sample_fingerprint;
  out.clipped_share = std::max(a.clipped_share, b.clipped_share);
  out.clipping_warning = a.clipping_warning || b.clipping_warning;
  return out;
}

std::vector<double> default_tau_grid(const TreatmentSample& sample, int points) {
  if (points < 1) throw DataError("tau grid needs at least one point");
  std::vector<double> y(sample.y().data(), sample.y().data() + sample.size());
  std::vector<double> grid;
  for (int k = 0; k < points; ++k) {
    const double prob = points == 1 ? 0.5 : 0.1 + 0.8 * static_cast<double>(k) / (points - 1);
    grid.push_back(quantile(y, prob));
  }
  return grid;
}

CdfProcess counterfactual_cdf(const TreatmentSample& sample, const NuisanceFits& nuisance,
                              const OutcomeRefit& refit, int level, int group, const std::vector<double>& tau,
                              int threads) {
  if (tau.empty()) throw DataError("counterfactual distribution needs a nonempty tau grid");
  if (!std::is_sorted(tau.begin(), tau.end())) throw DataError("tau grid must be sorted");
  const Index n = sample.size();
  const auto g = static_cast<Index>(tau.size());
  CdfProcess out;
  out.level = level;
  out.group = group;
  out.tau = tau;
  out.theta_raw.resize(g);
  out.influence.resize(n, g);
  out.sigma.resize(g);
  out.sample_fingerprint = sample.fingerprint();

  parallel_for(g, threads, [&](Index k) {
    VectorXd indicator(n);
    for (Index i = 0; i < n; ++i) indicator(i) = sample.y()(i) <= tau[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
    const TreatmentSample transformed = sample.with_outcome(std::move(indicator));
    NuisanceFits local = nuisance;
    store_outcome_fits(local, refit(transformed, level));
    const DrEstimate est = dr_counterfactual_mean(transformed, local, level, group);
    out.theta_raw(k) = est.theta;
    out.influence.col(k) = est.influence;
    out.sigma(k) = std::sqrt(est.influence.squaredNorm() / static_cast<double>(n));
  });

  std::vector<double> sorted(out.theta_raw.data(), out.theta_raw.data() + g);
  std::sort(sorted.begin(), sorted.end());
  out.theta.resize(g);
  for (Index k = 0; k < g; ++k) out.theta(k) = std::clamp(sorted[static_cast<std::size_t>(k)], 0.0, 1.0);
  out.band_lower = out.theta;
  out.band_upper = out.theta;
  return out;
}

VectorXd draw_multipliers(Index n, MultiplierKind kind, std::uint64_t seed, Index draw) {
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(draw)));
  VectorXd w(n);
  switch (kind) {
    case MultiplierKind::rademacher: {
      for (Index i = 0; i < n; ++i) w(i) = (rng() >> 63) ? 1.0 : -1.0;
      break;
    }
    case MultiplierKind::mammen: {
      const double root5 = std::sqrt(5.0);
      const double low = (1.0 - root5) / 2.0;
      const double high = (1.0 + root5) / 2.0;
      std::bernoulli_distribution pick_low((root5 + 1.0) / (2.0 * root5));
      for (Index i = 0; i < n; ++i) w(i) = pick_low(rng) ? low : high;
      break;
    }
    case MultiplierKind::gaussian: {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (Index i = 0; i < n; ++i) w(i) = normal(rng);
      break;
    }
  }
  return w;
}

BootstrapDraws multiplier_bootstrap(const MatrixXd& influence, Index n_draws, MultiplierKind kind,
                                    std::uint64_t seed) {
  if (n_draws < 1) throw DataError("multiplier bootstrap needs at least one draw");
  if (!influence.allFinite()) throw NumericalError("influence values must be finite");
  const Index n = influence.rows();
  const Index g = influence.cols();
  BootstrapDraws out;
  out.kind = kind;
  out.n_draws = n_draws;
  out.seed = seed;
  out.excluded.assign(static_cast<std::size_t>(g), false);
  VectorXd sigma(g);
  for (Index k = 0; k < g; ++k) {
    sigma(k) = std::sqrt(influence.col(k).squaredNorm() / static_cast<double>(n));
    out.excluded[static_cast<std::size_t>(k)] = !(sigma(k) > 0.0);
  }
  const double root_n = std::sqrt(static_cast<double>(n));
  out.sup_stats.resize(static_cast<std::size_t>(n_draws));
  for (Index b = 0; b < n_draws; ++b) {
    const VectorXd w = draw_multipliers(n, kind, seed, b);
    const VectorXd process = influence.transpose() * w / root_n;
    double sup = 0.0;
    for (Index k = 0; k < g; ++k) {
      if (out.excluded[static_cast<std::size_t>(k)]) continue;
      sup = std::max(sup, std::abs(process(k) / sigma(k)));
    }
    out.sup_stats[static_cast<std::size_t>(b)] = sup;
  }
  out.critical_value = quantile(out.sup_stats, 0.95);
  return out;
}

void attach_uniform_band(CdfProcess& process, const BootstrapDraws& draws) {
  const Index g = process.theta.size();
  const double root_n = std::sqrt(static_cast<double>(process.influence.rows()));
  process.band_lower.resize(g);
  process.band_upper.resize(g);
  for (Index k = 0; k < g; ++k) {
    const double half = draws.excluded[static_cast<std::size_t>(k)]
                            ? 0.0
                            : draws.critical_value * process.sigma(k) / root_n;
    process.band_lower(k) = std::clamp(process.theta(k) - half, 0.0, 1.0);
    process.band_upper(k) = std::clamp(process.theta(k) + half, 0.0, 1.0);
  }
}

DominanceTest sd_test(const CdfProcess& a, const CdfProcess& b, Index n_draws, std::uint64_t seed,
                      MultiplierKind kind) {
  if (a.tau != b.tau) throw DataError("dominance test requires a shared tau grid");
  if (a.sample_fingerprint != b.sample_fingerprint || a.influence.rows() != b.influence.rows()) {
    throw DataError("dominance test requires processes from the same sample");
  }
  if (n_draws < 1) throw DataError("dominance test needs at least one bootstrap draw");
  const Index n = a.influence.rows();
  const double root_n = std::sqrt(static_cast<double>(n));
  DominanceTest out;
  out.statistic = std::max(0.0, root_n * (a.theta - b.theta).maxCoeff());

  const MatrixXd diff = a.influence - b.influence;
  std::vector<double> sups(static_cast<std::size_t>(n_draws));
  for (Index d = 0; d < n_draws; ++d) {
    const VectorXd w = draw_multipliers(n, kind, seed, d);
    sups[static_cast<std::size_t>(d)] = (diff.transpose() * w).maxCoeff() / root_n;
  }
  out.critical_value = quantile(sups, 0.95);
  out.reject = out.statistic > out.critical_value;
  return out;
}

}  // namespace lpsa
