#include "lpsa/tuning.hpp"

#include "lpsa/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace lpsa {

namespace {

const MatrixXd& rows_or_all(const MatrixXd& x, const std::vector<Index>& rows, MatrixXd& storage) {
  if (rows.empty()) return x;
  storage = select_rows(x, rows);
  return storage;
}

// Exponent vectors of all degree-m monomials in `vars` variables.
void monomials(int vars, int m, std::vector<int>& current, std::vector<std::vector<int>>& out) {
  if (static_cast<int>(current.size()) == vars - 1) {
    const int used = std::accumulate(current.begin(), current.end(), 0);
    auto full = current;
    full.push_back(m - used);
    out.push_back(full);
    return;
  }
  const int used = std::accumulate(current.begin(), current.end(), 0);
  for (int e = m - used; e >= 0; --e) {
    current.push_back(e);
    monomials(vars, m, current, out);
    current.pop_back();
  }
}

}  // namespace

std::vector<int> assign_folds(const TreatmentSample& sample, int level, int n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw DataError("cross-validation needs at least two folds");
  std::vector<Index> eligible;
  for (Index i = 0; i < sample.size(); ++i) {
    if (sample.d(i, level) == 1.0) eligible.push_back(i);
  }
  if (static_cast<Index>(eligible.size()) < n_folds) {
    throw DataError("cross-validation needs at least as many level-" + std::to_string(level) +
                    " units as folds");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<int> folds(static_cast<std::size_t>(sample.size()), -1);
  for (std::size_t r = 0; r < eligible.size(); ++r) {
    folds[static_cast<std::size_t>(eligible[r])] = static_cast<int>(r % static_cast<std::size_t>(n_folds));
  }
  return folds;
}

VectorXd cv_predictions(const MeasurementPanel& panel, const TreatmentSample& sample, int level, Index k,
                        const std::vector<int>& folds, const TuningSetup& setup) {
  const Index n = panel.units();
  if (sample.size() != n || static_cast<Index>(folds.size()) != n) {
    throw DataError("cross-validation inputs disagree on the number of units");
  }
  ExtractionConfig cfg = setup.extraction;
  std::optional<RowSplit> split;
  if (cfg.split == SplitMode::random) split = make_row_split(panel.periods(), SplitScheme::random, cfg.split_seed);
  if (cfg.split == SplitMode::contiguous_halves) split = make_row_split(panel.periods(), SplitScheme::contiguous_halves);
  MatrixXd match_storage, pca_storage;
  const MatrixXd& x_match = rows_or_all(panel.x(), split ? split->matching : std::vector<Index>{}, match_storage);
  const MatrixXd& x_pca = rows_or_all(panel.x(), split ? split->pca : std::vector<Index>{}, pca_storage);
  const MatrixXd distances = pairwise_distances(x_match, cfg.metric, cfg.threads);
  const double periods = static_cast<double>(x_pca.rows());
  const bool average = setup.nuisance.outcome == OutcomeBackend::local_average || cfg.d_lambda == 0;

  const int n_folds = folds.empty() ? 0 : *std::max_element(folds.begin(), folds.end()) + 1;
  std::vector<std::vector<Index>> pools(static_cast<std::size_t>(n_folds));
  for (int f = 0; f < n_folds; ++f) {
    for (Index i = 0; i < n; ++i) {
      if (folds[static_cast<std::size_t>(i)] != f) pools[static_cast<std::size_t>(f)].push_back(i);
    }
    if (k > static_cast<Index>(pools[static_cast<std::size_t>(f)].size())) {
      throw DataError("K = " + std::to_string(k) + " exceeds the training pool of fold " + std::to_string(f));
    }
  }

  VectorXd pred = VectorXd::Constant(n, std::numeric_limits<double>::quiet_NaN());
  RegressionOptions reg = setup.nuisance.regression;
  parallel_for(n, cfg.threads, [&](Index i) {
    const int f = folds[static_cast<std::size_t>(i)];
    if (f < 0) return;
    const auto members = nearest_among(distances, i, pools[static_cast<std::size_t>(f)], k);
    MatrixXd loadings(static_cast<Index>(members.size()), 0);
    VectorXd target(0);
    if (!average) {
      const auto fit = local_pca_block(neighborhood_block(x_pca, members), cfg.d_lambda, cfg.eigen);
      loadings = fit.loadings;
      target = fit.factors.transpose() * x_pca.col(i) / periods;
    }
    const auto design = build_local_design(sample, members, loadings, target, i, level, Response::outcome, true,
                                           reg.add_intercept);
    const Link link = setup.nuisance.outcome == OutcomeBackend::local_logit ? Link::logit : Link::identity;
    pred(i) = fit_design(design, i, level, link, average, reg).fitted;
  });
  return pred;
}

TuningResult cross_validate_k(const MeasurementPanel& panel, const TreatmentSample& sample, int level,
                              std::vector<Index> k_candidates, int n_folds, std::uint64_t seed,
                              const TuningSetup& setup) {
  sample.require_level(level);
  if (k_candidates.empty()) throw DataError("cross-validation needs at least one candidate K");
  std::sort(k_candidates.begin(), k_candidates.end());
  k_candidates.erase(std::unique(k_candidates.begin(), k_candidates.end()), k_candidates.end());
  const auto folds = assign_folds(sample, level, n_folds, seed);

  Index smallest_pool = panel.units();
  for (int f = 0; f < n_folds; ++f) {
    const auto held = std::count(folds.begin(), folds.end(), f);
    smallest_pool = std::min<Index>(smallest_pool, panel.units() - static_cast<Index>(held));
  }

  TuningResult out;
  out.method = TuningMethod::cv;
  double best = std::numeric_limits<double>::infinity();
  for (Index k : k_candidates) {
    const bool needs_pca = setup.nuisance.outcome != OutcomeBackend::local_average && setup.extraction.d_lambda > 0;
    if (k < 1 || k > smallest_pool || (needs_pca && k < setup.extraction.d_lambda)) {
      out.warnings.push_back("candidate K = " + std::to_string(k) + " skipped: outside the training fold size");
      continue;
    }
    const VectorXd pred = cv_predictions(panel, sample, level, k, folds, setup);
    KahanSum sse;
    Index used = 0;
    for (Index i = 0; i < sample.size(); ++i) {
      if (folds[static_cast<std::size_t>(i)] < 0) continue;
      const double e = sample.y()(i) - pred(i);
      sse.add(e * e);
      ++used;
    }
    const double cv = sse.value() / static_cast<double>(used);
    out.criterion_curve.emplace_back(k, cv);
    if (cv < best) {
      best = cv;
      out.k_selected = k;
    }
  }
  if (out.criterion_curve.empty()) throw DataError("tuning error: every candidate K was skipped");
  return out;
}

std::vector<Index> default_k_candidates(Index n, int d_alpha, int m) {
  const double base = std::pow(static_cast<double>(n), 2.0 * m / (2.0 * m + d_alpha));
  std::vector<Index> out;
  for (double c : {0.5, 1.0, 1.5, 2.0}) {
    const auto k = std::clamp<Index>(static_cast<Index>(std::lround(c * base)), 1, n);
    if (out.empty() || out.back() != k) out.push_back(k);
  }
  return out;
}

Index dpi_update(double variance_sum, double bias_sum, Index k_initial, int d_alpha, int m, Index lower,
                 Index upper) {
  if (!(bias_sum > 0.0)) return upper;
  const double ratio = d_alpha * variance_sum / (2.0 * m * bias_sum);
  const double power = static_cast<double>(d_alpha) / (2.0 * m + d_alpha);
  const double raw = std::round(std::pow(ratio, power) * static_cast<double>(k_initial));
  if (!std::isfinite(raw) || raw >= static_cast<double>(upper)) return upper;
  return std::max(lower, static_cast<Index>(raw));
}

TuningResult dpi_k(const MeasurementPanel& panel, const TreatmentSample& sample, int level, Index k_initial,
                   const DpiOptions& options, const TuningSetup& setup) {
  sample.require_level(level);
  if (options.d_alpha < 1 || options.m < 1) throw DataError("DPI needs d_alpha >= 1 and m >= 1");
  const Index n = panel.units();
  if (k_initial < 1 || k_initial > n) throw DataError("initial K must lie in [1, n]");

  const auto d_lambda = static_cast<Index>(binomial(options.m - 1 + options.d_alpha, options.d_alpha));
  const auto d_bias = static_cast<Index>(binomial(options.m + options.d_alpha - 1, options.d_alpha - 1));
  const Index d_linear = options.d_alpha;
  Index extracted = d_lambda;
  if (options.proxy == BiasProxy::extra_components) {
    extracted = d_lambda + d_bias;
  } else {
    extracted = std::max(d_lambda, d_linear + 1);
  }

  ExtractionConfig cfg = setup.extraction;
  cfg.k = k_initial;
  cfg.d_lambda = extracted;
  const Extraction pilot = extract_latent(panel, cfg);

  std::vector<std::vector<int>> exponents;
  if (options.proxy == BiasProxy::polynomial) {
    std::vector<int> current;
    monomials(options.d_alpha, options.m, current, exponents);
  }

  const RegressionOptions& reg = setup.nuisance.regression;
  std::vector<double> v(static_cast<std::size_t>(n), 0.0), b(static_cast<std::size_t>(n), 0.0);
  parallel_for(n, cfg.threads, [&](Index i) {
    if (sample.d(i, level) != 1.0) return;
    const auto& nb = pilot.neighborhoods[static_cast<std::size_t>(i)];
    const auto& fit = pilot.fits[static_cast<std::size_t>(i)];
    const Index kk = fit.loadings.rows();
    const MatrixXd lead = fit.loadings.leftCols(d_lambda);
    const VectorXd own = own_loading(nb, fit);
    const VectorXd own_lead = own.head(d_lambda);

    MatrixXd proxy;
    VectorXd own_proxy;
    if (options.proxy == BiasProxy::extra_components) {
      proxy = fit.loadings.middleCols(d_lambda, d_bias);
      own_proxy = own.segment(d_lambda, d_bias);
    } else {
      const auto terms = static_cast<Index>(exponents.size());
      proxy = MatrixXd::Ones(kk, terms);
      own_proxy = VectorXd::Ones(terms);
      for (Index t = 0; t < terms; ++t) {
        for (Index a = 0; a < d_linear; ++a) {
          const int e = exponents[static_cast<std::size_t>(t)][static_cast<std::size_t>(a)];
          if (e == 0) continue;
          proxy.col(t).array() *= fit.loadings.col(1 + a).array().pow(e);
          own_proxy(t) *= std::pow(own(1 + a), e);
        }
      }
    }

    const auto base = build_local_design(sample, nb.members, lead, own_lead, i, level, Response::outcome, true,
                                         reg.add_intercept);
    const Index p = base.x.cols();
    const Index used = base.x.rows();
    if (used > p) {
      const auto sol = solve_least_squares(base.x, base.y);
      if (sol) {
        const VectorXd resid = base.y - base.x * sol->coef;
        const double sigma2 = resid.squaredNorm() / static_cast<double>(used - p);
        MatrixXd gram = base.x.transpose() * base.x;
        if (sol->ridge) gram.diagonal().array() += 1e-10 * gram.trace() / static_cast<double>(p);
        v[static_cast<std::size_t>(i)] = sigma2 * base.target.dot(gram.ldlt().solve(base.target));
      }
    }

    const auto aug = build_local_design(sample, nb.members, lead, own_lead, i, level, Response::outcome, true,
                                        reg.add_intercept, &proxy, &own_proxy);
    if (aug.x.rows() < aug.x.cols()) return;
    const auto sol = solve_least_squares(aug.x, aug.y);
    if (!sol) return;
    const VectorXd b_proxy = sol->coef.tail(proxy.cols());
    b[static_cast<std::size_t>(i)] = (proxy * b_proxy).squaredNorm() / static_cast<double>(kk);
  });

  TuningResult out;
  out.method = TuningMethod::dpi;
  out.k_initial = k_initial;
  KahanSum sv, sb;
  for (Index i = 0; i < n; ++i) {
    sv.add(v[static_cast<std::size_t>(i)]);
    sb.add(b[static_cast<std::size_t>(i)]);
  }
  out.sum_variance = sv.value();
  out.sum_bias = sb.value();
  const Index lower = std::min<Index>(sample.controls() + d_lambda + 1, n);
  if (!(out.sum_bias > 0.0)) out.warnings.push_back("degenerate bias estimate: K capped at n");
  out.k_selected = dpi_update(out.sum_variance, out.sum_bias, k_initial, options.d_alpha, options.m, lower, n);
  out.criterion_curve.emplace_back(k_initial, out.sum_variance);
  out.criterion_curve.emplace_back(k_initial, out.sum_bias);
  return out;
}

std::string criterion_curve_csv(const TuningResult& result) {
  CsvWriter w({"method", "K", "value"});
  const bool dpi = result.method == TuningMethod::dpi;
  for (std::size_t r = 0; r < result.criterion_curve.size(); ++r) {
    const auto& [k, value] = result.criterion_curve[r];
    std::string label = dpi ? (r == 0 ? "dpi_variance_sum" : "dpi_bias_sum") : "cv";
    w.add_row({label, std::to_string(k), format_double(value)});
  }
  if (dpi) w.add_row({"dpi_selected", std::to_string(result.k_selected), ""});
  return w.str();
}

}  // namespace lpsa
