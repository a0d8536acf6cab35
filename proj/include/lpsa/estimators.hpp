// Doubly-robust counterfactual means, contrasts, distribution processes and
// multiplier-bootstrap inference.
#pragma once

#include "lpsa/data.hpp"
#include "lpsa/regression.hpp"

#include <functional>

namespace lpsa {

// Empty NuisanceFits sized for the sample, every entry NaN, marginal shares
// filled in.
NuisanceFits make_nuisance(const TreatmentSample& sample);
void store_outcome_fits(NuisanceFits& nuisance, const std::vector<LocalFitRecord>& records);
void store_propensity_fits(NuisanceFits& nuisance, const std::vector<LocalFitRecord>& records);

inline constexpr double kNormalQuantile975 = 1.959964;
// Level-j units with a clipped propensity at or above this share trigger a
// diagnostics warning.
inline constexpr double kClippingWarningShare = 0.2;

// Doubly-robust estimate of E[y(j) | s = j'] with influence values, the
// plug-in variance and a 95% interval. Throws DataError when no unit is
// observed at level j or j'.
DrEstimate dr_counterfactual_mean(const TreatmentSample& sample, const NuisanceFits& nuisance, int level,
                                  int group);

// Plug-in variance sigma^2 for an estimate computed from the same fits.
double dr_variance(const TreatmentSample& sample, const NuisanceFits& nuisance, double theta, int level,
                   int group);

// theta_a - theta_b with the variance of the differenced influence values.
// Both estimates must come from the same sample and conditioning group.
DrEstimate treatment_effect(const DrEstimate& a, const DrEstimate& b);

// Refits the outcome means of level j for the transformed outcome 1(y <= tau).
using OutcomeRefit = std::function<std::vector<LocalFitRecord>(const TreatmentSample&, int level)>;

// Default grid: `points` evenly spaced probabilities from 0.1 to 0.9 mapped
// through the sample quantiles of the observed outcome.
std::vector<double> default_tau_grid(const TreatmentSample& sample, int points = 17);

// Counterfactual distribution of y(j) for group j' on `tau`. Propensities
// come from `nuisance`; outcome means are refit per tau through `refit`.
// Raw values are rearranged (sorted) and clipped to [0, 1].
CdfProcess counterfactual_cdf(const TreatmentSample& sample, const NuisanceFits& nuisance,
                              const OutcomeRefit& refit, int level, int group, const std::vector<double>& tau,
                              int threads = 0);

enum class MultiplierKind { rademacher, mammen, gaussian };

struct BootstrapDraws {
  MultiplierKind kind = MultiplierKind::rademacher;
  Index n_draws = 0;
  std::uint64_t seed = 0;
  std::vector<double> sup_stats;
  double critical_value = 0.0;        // 0.95 quantile of sup_stats
  std::vector<bool> excluded;         // per-tau: zero standard deviation
};

// Multipliers of draw `draw` (mean zero, variance one); draws are derived
// from the master seed independently of one another.
VectorXd draw_multipliers(Index n, MultiplierKind kind, std::uint64_t seed, Index draw);

// Studentized sup statistics sup_tau |n^{-1/2} sum_i w_i phi_i(tau) / sigma(tau)|
// with sigma(tau) the root mean square of the influence column.
BootstrapDraws multiplier_bootstrap(const MatrixXd& influence, Index n_draws, MultiplierKind kind,
                                    std::uint64_t seed);

// Fills band_lower/band_upper of the process from bootstrap draws.
void attach_uniform_band(CdfProcess& process, const BootstrapDraws& draws);

struct DominanceTest {
  double statistic = 0.0;
  double critical_value = 0.0;
  bool reject = false;
};

// H0: theta_a(tau) <= theta_b(tau) for all tau.
DominanceTest sd_test(const CdfProcess& a, const CdfProcess& b, Index n_draws, std::uint64_t seed,
                      MultiplierKind kind = MultiplierKind::rademacher);

}  // namespace lpsa
