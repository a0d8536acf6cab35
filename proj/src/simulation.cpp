#include "lpsa/simulation.hpp"

#include "lpsa/io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace lpsa {

namespace {

enum Stream : std::uint64_t { kAlpha = 1, kVarpi, kV, kEps0, kEps1, kU };

VectorXd uniform_draws(Index count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  VectorXd out(count);
  for (Index i = 0; i < count; ++i) out(i) = unif(rng);
  return out;
}

MatrixXd normal_draws(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> norm(0.0, 1.0);
  MatrixXd out(rows, cols);
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) out(r, c) = norm(rng);
  }
  return out;
}

template <class F>
double simpson(F f, int intervals) {
  const double h = 1.0 / intervals;
  KahanSum s;
  s.add(f(0.0));
  s.add(f(1.0));
  for (int k = 1; k < intervals; ++k) s.add((k % 2 == 1 ? 4.0 : 2.0) * f(k * h));
  return s.value() * h / 3.0;
}

NuisanceFits oracle_nuisance(const SimulatedData& data, double p_clip) {
  NuisanceFits fits = make_nuisance(data.sample);
  for (Index i = 0; i < data.sample.size(); ++i) {
    const double a = data.alpha(i);
    const double p1 = std::clamp(data.propensity(i), p_clip, 1.0 - p_clip);
    fits.varsigma(i, 0) = untreated_mean(a);
    fits.varsigma(i, 1) = 2.0 * a + a * a + 1.0;
    fits.p(i, 1) = p1;
    fits.p(i, 0) = 1.0 - p1;
    fits.p_unclipped(i, 1) = data.propensity(i);
    fits.p_unclipped(i, 0) = 1.0 - data.propensity(i);
  }
  return fits;
}

}  // namespace

double eta(DgpModel model, double alpha, double varpi) {
  if (model == DgpModel::model1) return (alpha - varpi) * (alpha - varpi);
  return std::sin(std::numbers::pi * (alpha + varpi));
}

double treatment_probability(double alpha) {
  const double c = alpha - 0.5;
  return logistic(c + c * c);
}

double untreated_mean(double alpha) { return alpha + alpha * alpha; }

SimulatedData generate(const DgpSpec& spec) {
  if (spec.n < 2 || spec.periods < 2) throw DataError("simulation needs n >= 2 and T >= 2");
  const Index n = spec.n;
  const Index periods = spec.periods;
  const VectorXd alpha = uniform_draws(n, derive_seed(spec.seed, kAlpha));
  const VectorXd varpi = uniform_draws(periods, derive_seed(spec.seed, kVarpi));
  const VectorXd v = uniform_draws(n, derive_seed(spec.seed, kV));
  MatrixXd eps = normal_draws(n, 2, derive_seed(spec.seed, kEps0));
  eps.col(1) = normal_draws(n, 1, derive_seed(spec.seed, kEps1));
  MatrixXd x = normal_draws(periods, n, derive_seed(spec.seed, kU));
  if (spec.noise_free) {
    eps.setZero();
    x.setZero();
  }
  for (Index i = 0; i < n; ++i) {
    for (Index t = 0; t < periods; ++t) x(t, i) += eta(spec.model, alpha(i), varpi(t));
  }

  VectorXd p(n), y0(n), y1(n), y(n);
  std::vector<int> s(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const double a = alpha(i);
    p(i) = treatment_probability(a);
    y0(i) = untreated_mean(a) + eps(i, 0);
    y1(i) = 2.0 * a + a * a + 1.0 + eps(i, 1);
    s[static_cast<std::size_t>(i)] = v(i) <= p(i) ? 1 : 0;
    y(i) = s[static_cast<std::size_t>(i)] == 1 ? y1(i) : y0(i);
  }
  return SimulatedData{MeasurementPanel(std::move(x)), TreatmentSample(y, s, MatrixXd(n, 0), 2), alpha, varpi, p,
                       y0, y1};
}

double true_theta01() {
  constexpr int kIntervals = 1 << 16;
  const double num = simpson([](double a) { return untreated_mean(a) * treatment_probability(a); }, kIntervals);
  const double den = simpson([](double a) { return treatment_probability(a); }, kIntervals);
  return num / den;
}

MonteCarloValue true_theta01_monte_carlo(Index draws, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  KahanSum sa, sb, saa, sbb, sab;
  for (Index k = 0; k < draws; ++k) {
    const double a = unif(rng);
    const double p = treatment_probability(a);
    const double num = untreated_mean(a) * p;
    sa.add(num);
    sb.add(p);
    saa.add(num * num);
    sbb.add(p * p);
    sab.add(num * p);
  }
  const double m = static_cast<double>(draws);
  const double ma = sa.value() / m, mb = sb.value() / m;
  const double vaa = saa.value() / m - ma * ma, vbb = sbb.value() / m - mb * mb, vab = sab.value() / m - ma * mb;
  const double r = ma / mb;
  const double var = (vaa - 2.0 * r * vab + r * r * vbb) / (mb * mb);
  return {r, std::sqrt(std::max(var, 0.0) / m)};
}

EstimatorConfig default_estimator_config(McBackend backend) {
  EstimatorConfig cfg;
  cfg.backend = backend;
  cfg.metric.kind = MetricKind::pseudo_max;
  switch (backend) {
    case McBackend::local_linear:
      cfg.label = "local_linear";
      cfg.k = {KRule::Kind::power, 0, 1.0, 0.8};
      cfg.d_lambda = 2;
      cfg.split = SplitMode::contiguous_halves;
      cfg.propensity = PropensityBackend::local_average;
      cfg.dpi = {1, 2, BiasProxy::polynomial};
      break;
    case McBackend::local_constant:
      cfg.label = "local_constant";
      cfg.k = {KRule::Kind::power, 0, 1.0, 2.0 / 3.0};
      cfg.d_lambda = 0;
      cfg.split = SplitMode::none;
      cfg.propensity = PropensityBackend::local_average;
      cfg.dpi = {1, 1, BiasProxy::polynomial};
      break;
    case McBackend::oracle:
      cfg.label = "oracle";
      cfg.k = {KRule::Kind::fixed, 1, 1.0, 0.0};
      cfg.d_lambda = 0;
      cfg.split = SplitMode::none;
      break;
  }
  return cfg;
}

Index resolve_k(const KRule& rule, Index n) {
  if (rule.kind == KRule::Kind::fixed) return rule.fixed;
  const double k = std::round(rule.constant * std::pow(static_cast<double>(n), rule.exponent));
  return std::clamp<Index>(static_cast<Index>(k), 1, n);
}

DrEstimate estimate_theta01(const SimulatedData& data, const EstimatorConfig& config, Index* k_used, int threads) {
  if (config.backend == McBackend::oracle) {
    if (k_used) *k_used = 0;
    return dr_counterfactual_mean(data.sample, oracle_nuisance(data, config.p_clip), 0, 1);
  }
  const bool constant = config.backend == McBackend::local_constant;
  TuningSetup setup;
  setup.extraction.metric = config.metric;
  setup.extraction.split = config.split;
  setup.extraction.d_lambda = constant ? 0 : config.d_lambda;
  setup.extraction.threads = threads;
  setup.nuisance.outcome = constant ? OutcomeBackend::local_average : OutcomeBackend::local_ls;
  setup.nuisance.propensity = constant ? PropensityBackend::local_average : config.propensity;
  setup.nuisance.regression.p_clip = config.p_clip;
  setup.nuisance.regression.threads = threads;

  Index k = resolve_k(config.k, data.sample.size());
  if (config.k.kind == KRule::Kind::dpi) {
    k = dpi_k(data.panel, data.sample, 0, k, config.dpi, setup).k_selected;
  }
  if (k_used) *k_used = k;
  setup.extraction.k = k;
  const Extraction extraction = extract_latent(data.panel, setup.extraction);
  const NuisanceResult nuisance = fit_nuisance(data.sample, extraction, {0, 1}, setup.nuisance);
  return dr_counterfactual_mean(data.sample, nuisance.fits, 0, 1);
}

McReport run_monte_carlo(const DgpSpec& spec, const EstimatorConfig& config, Index n_reps,
                         std::uint64_t master_seed, int threads) {
  if (n_reps < 1) throw DataError("Monte Carlo needs at least one replication");
  const double truth = true_theta01();
  struct Rep {
    bool ok = false;
    double theta = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    Index k = 0;
    double influence_mean = 0.0;
    std::string error;
  };
  std::vector<Rep> reps(static_cast<std::size_t>(n_reps));
  parallel_for(n_reps, threads, [&](Index r) {
    Rep& rep = reps[static_cast<std::size_t>(r)];
    try {
      DgpSpec local = spec;
      local.seed = derive_seed(master_seed, static_cast<std::uint64_t>(r));
      const SimulatedData data = generate(local);
      const DrEstimate est = estimate_theta01(data, config, &rep.k, 1);
      if (!std::isfinite(est.theta) || !std::isfinite(est.sigma)) throw NumericalError("non-finite estimate");
      rep.theta = est.theta;
      rep.lower = est.ci95.lower;
      rep.upper = est.ci95.upper;
      rep.influence_mean = est.influence.mean();
      rep.ok = true;
    } catch (const std::exception& e) {
      rep.error = "replication " + std::to_string(r) + ": " + e.what();
    }
  });

  McReport out;
  out.model = spec.model;
  out.config = config;
  out.n = spec.n;
  out.periods = spec.periods;
  out.truth = truth;
  KahanSum sum, cover, length, ks;
  for (const auto& rep : reps) {
    if (!rep.ok) {
      ++out.failures;
      out.failure_messages.push_back(rep.error);
      continue;
    }
    out.estimates.push_back(rep.theta);
    sum.add(rep.theta);
    cover.add(rep.lower <= truth && truth <= rep.upper ? 1.0 : 0.0);
    length.add(rep.upper - rep.lower);
    ks.add(static_cast<double>(rep.k));
    out.max_abs_influence_mean = std::max(out.max_abs_influence_mean, std::abs(rep.influence_mean));
  }
  out.n_reps = static_cast<Index>(out.estimates.size());
  if (out.n_reps == 0) return out;
  const double m = static_cast<double>(out.n_reps);
  const double mean = sum.value() / m;
  KahanSum dev, sq;
  for (double t : out.estimates) {
    dev.add((t - mean) * (t - mean));
    sq.add((t - truth) * (t - truth));
  }
  out.bias = mean - truth;
  out.sd = std::sqrt(dev.value() / m);
  out.rmse = std::sqrt(sq.value() / m);
  out.cr = cover.value() / m;
  out.al = length.value() / m;
  out.mean_k = ks.value() / m;
  return out;
}

std::string model_name(DgpModel model) { return model == DgpModel::model1 ? "model1" : "model2"; }

std::string backend_name(McBackend backend) {
  switch (backend) {
    case McBackend::local_constant:
      return "local_constant";
    case McBackend::local_linear:
      return "local_linear";
    case McBackend::oracle:
      break;
  }
  return "oracle";
}

std::string k_rule_name(const KRule& rule) {
  std::ostringstream os;
  switch (rule.kind) {
    case KRule::Kind::fixed:
      os << "K=" << rule.fixed;
      break;
    case KRule::Kind::power:
      os << "K=" << rule.constant << "n^" << rule.exponent;
      break;
    case KRule::Kind::dpi:
      os << "DPI(" << rule.constant << "n^" << rule.exponent << ")";
      break;
  }
  return os.str();
}

std::string mc_table_csv(const std::vector<McReport>& reports) {
  CsvWriter w({"model", "backend", "K_rule", "BIAS", "SD", "RMSE", "CR", "AL", "n", "T", "reps", "failures",
               "mean_K", "truth"});
  for (const auto& r : reports) {
    w.add_row({model_name(r.model), r.config.label.empty() ? backend_name(r.config.backend) : r.config.label,
               k_rule_name(r.config.k), format_double(r.bias), format_double(r.sd), format_double(r.rmse),
               format_double(r.cr), format_double(r.al), std::to_string(r.n), std::to_string(r.periods),
               std::to_string(r.n_reps), std::to_string(r.failures), format_double(r.mean_k),
               format_double(r.truth)});
  }
  return w.str();
}

}  // namespace lpsa
