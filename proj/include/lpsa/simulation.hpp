// Synthetic designs with a scalar latent confounder and the Monte Carlo
// harness that scores the estimator on them.
#pragma once

#include "lpsa/pipeline.hpp"
#include "lpsa/tuning.hpp"

#include <string>

namespace lpsa {

enum class DgpModel { model1, model2 };

struct DgpSpec {
  DgpModel model = DgpModel::model1;
  Index n = 500;
  Index periods = 500;
  std::uint64_t seed = 0;
  bool noise_free = false;  // zero u and epsilon (debugging only)
};

struct SimulatedData {
  MeasurementPanel panel;
  TreatmentSample sample;
  VectorXd alpha;
  VectorXd varpi;
  VectorXd propensity;  // P(s = 1 | alpha)
  VectorXd y0;
  VectorXd y1;
};

// eta_t(alpha) for the chosen model.
double eta(DgpModel model, double alpha, double varpi);
// logistic((alpha - 0.5) + (alpha - 0.5)^2)
double treatment_probability(double alpha);
// E[y(0) | alpha] = alpha + alpha^2
double untreated_mean(double alpha);

// Deterministic in spec.seed. Throws DataError when n or T is below 2.
SimulatedData generate(const DgpSpec& spec);

// E[y(0) | s = 1] = int (a + a^2) p(a) da / int p(a) da over U(0, 1),
// evaluated by composite Simpson quadrature.
double true_theta01();

struct MonteCarloValue {
  double value = 0.0;
  double std_error = 0.0;
};

// The same ratio from `draws` uniform draws (delta-method standard error).
MonteCarloValue true_theta01_monte_carlo(Index draws, std::uint64_t seed);

enum class McBackend { local_constant, local_linear, oracle };

struct KRule {
  enum class Kind { fixed, power, dpi };
  Kind kind = Kind::power;
  Index fixed = 0;
  double constant = 1.0;  // K = round(constant * n^exponent), or the DPI start
  double exponent = 0.8;
};

struct EstimatorConfig {
  std::string label;
  McBackend backend = McBackend::local_linear;
  KRule k;
  Index d_lambda = 2;
  SplitMode split = SplitMode::contiguous_halves;
  PropensityBackend propensity = PropensityBackend::local_ls;
  DistanceMetric metric;
  double p_clip = 0.01;
  DpiOptions dpi;
};

// local_linear: halves split, d_lambda = 2, K = n^{4/5}, local least squares
// outcome and local-average propensity. local_constant: no split,
// K = n^{2/3}, local averages for both.
// oracle: true outcome means and propensities. Matching uses the pseudo-max
// distance.
EstimatorConfig default_estimator_config(McBackend backend);

Index resolve_k(const KRule& rule, Index n);

struct McReport {
  DgpModel model = DgpModel::model1;
  EstimatorConfig config;
  Index n = 0;
  Index periods = 0;
  double truth = 0.0;
  double bias = 0.0;
  double sd = 0.0;  // population standard deviation over replications
  double rmse = 0.0;
  double cr = 0.0;
  double al = 0.0;
  double mean_k = 0.0;
  double max_abs_influence_mean = 0.0;  // should vanish up to rounding
  Index n_reps = 0;
  Index failures = 0;
  std::vector<std::string> failure_messages;
  std::vector<double> estimates;  // in replication order, failures excluded
};

// Estimate of theta_{0,1} for one simulated dataset; `k_used` receives K.
DrEstimate estimate_theta01(const SimulatedData& data, const EstimatorConfig& config, Index* k_used = nullptr,
                            int threads = 1);

// Replication r uses data seed derive_seed(master_seed, r). Replications run
// in parallel; aggregation is sequential in replication order.
McReport run_monte_carlo(const DgpSpec& spec, const EstimatorConfig& config, Index n_reps,
                         std::uint64_t master_seed, int threads = 0);

std::string model_name(DgpModel model);
std::string backend_name(McBackend backend);
std::string k_rule_name(const KRule& rule);

// One row per report: model, backend, K-rule, BIAS, SD, RMSE, CR, AL, plus
// bookkeeping columns.
std::string mc_table_csv(const std::vector<McReport>& reports);

}  // namespace lpsa
