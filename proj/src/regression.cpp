#include "lpsa/regression.hpp"

#include "lpsa/io.hpp"

#include <algorithm>
#include <cmath>

namespace lpsa {

namespace {

constexpr double kSingularRatio = 1e-12;
constexpr double kRidgeScale = 1e-10;
// Linear predictors beyond this magnitude mean fitted probabilities are
// numerically 0 or 1: the logit likelihood has no finite maximizer.
constexpr double kSeparationEta = 30.0;

double response_value(const TreatmentSample& sample, Index unit, int level, Response response) {
  return response == Response::outcome ? sample.y()(unit) : sample.d(unit, level);
}

void check_inputs(const TreatmentSample& sample, const std::vector<Neighborhood>& neighborhoods,
                  const std::vector<LocalFactorFit>* fits, int level) {
  if (level < 0 || level >= sample.num_levels()) {
    throw DataError("treatment level " + std::to_string(level) + " out of range");
  }
  if (static_cast<Index>(neighborhoods.size()) != sample.size()) {
    throw DataError("one neighborhood per unit is required");
  }
  if (fits && fits->size() != neighborhoods.size()) {
    throw DataError("one local factor fit per neighborhood is required");
  }
}

LocalFitRecord local_average(const LocalDesign& design, Index unit, int level) {
  LocalFitRecord rec;
  rec.unit = unit;
  rec.level = level;
  rec.n_used = design.y.size();
  if (rec.n_used == 0) {
    throw EstimationError("no eligible neighbors for unit " + std::to_string(unit) + " at level " +
                          std::to_string(level));
  }
  rec.fitted = design.y.mean();
  rec.unclipped = rec.fitted;
  return rec;
}

void unpack(const LocalDesign& design, const VectorXd& coef, LocalFitRecord& rec) {
  rec.beta = coef.head(design.z_cols);
  Index at = design.z_cols;
  if (design.intercept) rec.intercept = coef(at++);
  rec.b = coef.segment(at, design.loading_cols);
}

}  // namespace

double logistic(double eta) {
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

LocalDesign build_local_design(const TreatmentSample& sample, const std::vector<Index>& members,
                               const MatrixXd& loadings, const VectorXd& target_loading, Index unit,
                               int level, Response response, bool eligible_only, bool add_intercept,
                               const MatrixXd* extra, const VectorXd* extra_target) {
  LocalDesign design;
  design.z_cols = sample.controls();
  design.intercept = add_intercept;
  design.loading_cols = loadings.cols();
  const Index extra_cols = extra ? extra->cols() : 0;
  const Index width = design.z_cols + (add_intercept ? 1 : 0) + design.loading_cols + extra_cols;

  for (std::size_t k = 0; k < members.size(); ++k) {
    if (!eligible_only || sample.d(members[k], level) == 1.0) design.rows.push_back(static_cast<Index>(k));
  }
  const auto used = static_cast<Index>(design.rows.size());
  design.x.resize(used, width);
  design.y.resize(used);
  auto fill = [&](auto&& row, Index member_pos, Index who, const VectorXd& lam, const VectorXd* ext) {
    Index at = 0;
    for (Index c = 0; c < design.z_cols; ++c) row(at++) = sample.z()(who, c);
    if (add_intercept) row(at++) = 1.0;
    for (Index c = 0; c < design.loading_cols; ++c) {
      row(at++) = member_pos >= 0 ? loadings(member_pos, c) : lam(c);
    }
    for (Index c = 0; c < extra_cols; ++c) row(at++) = member_pos >= 0 ? (*extra)(member_pos, c) : (*ext)(c);
  };
  for (Index r = 0; r < used; ++r) {
    const Index pos = design.rows[static_cast<std::size_t>(r)];
    const Index who = members[static_cast<std::size_t>(pos)];
    auto row = design.x.row(r);
    fill(row, pos, who, target_loading, nullptr);
    design.y(r) = response_value(sample, who, level, response);
    design.rows[static_cast<std::size_t>(r)] = who;
  }
  design.target.resize(width);
  fill(design.target, -1, unit, target_loading, extra_target);
  return design;
}

std::optional<LeastSquaresSolution> solve_least_squares(const MatrixXd& x, const VectorXd& y) {
  MatrixXd gram = x.transpose() * x;
  const VectorXd rhs = x.transpose() * y;
  const double trace = gram.trace();
  if (!(trace > 0.0)) return std::nullopt;
  LeastSquaresSolution sol;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  const double top = eig.eigenvalues().maxCoeff();
  const double bottom = eig.eigenvalues().minCoeff();
  if (bottom <= kSingularRatio * top) {
    gram.diagonal().array() += kRidgeScale * trace / static_cast<double>(gram.rows());
    sol.ridge = true;
  }
  sol.coef = gram.llt().solve(rhs);
  return sol;
}

QmleSolution solve_logit_qmle(const MatrixXd& x, const VectorXd& y, int max_iterations, double tolerance) {
  QmleSolution sol;
  sol.coef = VectorXd::Zero(x.cols());
  for (int iter = 1; iter <= max_iterations; ++iter) {
    const VectorXd eta = x * sol.coef;
    if (eta.cwiseAbs().maxCoeff() > kSeparationEta) return sol;
    VectorXd mu(eta.size());
    VectorXd weight(eta.size());
    for (Index r = 0; r < eta.size(); ++r) {
      mu(r) = logistic(eta(r));
      weight(r) = mu(r) * (1.0 - mu(r));
    }
    const VectorXd score = x.transpose() * (y - mu);
    MatrixXd hessian = x.transpose() * weight.asDiagonal() * x;
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(hessian, Eigen::EigenvaluesOnly);
    const double top = eig.eigenvalues().maxCoeff();
    if (!(top > 0.0)) return sol;
    if (eig.eigenvalues().minCoeff() <= kSingularRatio * top) {
      hessian.diagonal().array() += kRidgeScale * hessian.trace() / static_cast<double>(hessian.rows());
      sol.ridge = true;
    }
    const VectorXd step = hessian.llt().solve(score);
    if (!step.allFinite()) return sol;
    sol.coef += step;
    sol.iterations = iter;
    if (step.cwiseAbs().maxCoeff() <= tolerance) {
      sol.converged = (x * sol.coef).cwiseAbs().maxCoeff() <= kSeparationEta;
      return sol;
    }
  }
  return sol;
}

LocalFitRecord fit_design(const LocalDesign& design, Index unit, int level, Link link, bool average_only,
                          const RegressionOptions& options) {
  const Index used = design.y.size();
  if (used == 0) {
    throw EstimationError("no eligible neighbors for unit " + std::to_string(unit) + " at level " +
                          std::to_string(level));
  }
  if (average_only) return local_average(design, unit, level);
  if (used < design.x.cols()) {
    auto rec = local_average(design, unit, level);
    rec.flags |= kFitLocalAverage;
    return rec;
  }

  LocalFitRecord rec;
  rec.unit = unit;
  rec.level = level;
  rec.n_used = used;
  if (link == Link::identity) {
    const auto sol = solve_least_squares(design.x, design.y);
    if (!sol) {
      rec = local_average(design, unit, level);
      rec.flags |= kFitLocalAverage;
      return rec;
    }
    if (sol->ridge) rec.flags |= kFitRidge;
    unpack(design, sol->coef, rec);
    rec.fitted = design.target.dot(sol->coef);
  } else {
    const bool constant_response = (design.y.array() == design.y(0)).all();
    const QmleSolution sol = constant_response
                                 ? QmleSolution{}
                                 : solve_logit_qmle(design.x, design.y, options.max_iterations, options.tolerance);
    if (!sol.converged) {
      rec = local_average(design, unit, level);
      rec.flags |= kFitQmleFallback;
      return rec;
    }
    if (sol.ridge) rec.flags |= kFitRidge;
    unpack(design, sol.coef, rec);
    rec.fitted = logistic(design.target.dot(sol.coef));
  }
  if (!std::isfinite(rec.fitted)) {
    throw NumericalError("non-finite fitted value for unit " + std::to_string(unit) + " at level " +
                         std::to_string(level));
  }
  rec.unclipped = rec.fitted;
  return rec;
}

VectorXd own_loading(const Neighborhood& nbhd, const LocalFactorFit& fit) {
  const auto it = std::lower_bound(nbhd.members.begin(), nbhd.members.end(), nbhd.center);
  if (it == nbhd.members.end() || *it != nbhd.center) {
    throw DataError("unit " + std::to_string(nbhd.center) + " is not a member of its own neighborhood");
  }
  return fit.loadings.row(it - nbhd.members.begin()).transpose();
}

namespace {

std::vector<LocalFitRecord> fit_all(const TreatmentSample& sample, const std::vector<Neighborhood>& neighborhoods,
                                    const std::vector<LocalFactorFit>* fits, int level, Response response,
                                    bool eligible_only, Link link, bool average_only,
                                    const RegressionOptions& options) {
  check_inputs(sample, neighborhoods, fits, level);
  std::vector<LocalFitRecord> out(neighborhoods.size());
  parallel_for(static_cast<Index>(neighborhoods.size()), options.threads, [&](Index i) {
    const auto& nb = neighborhoods[static_cast<std::size_t>(i)];
    const MatrixXd empty(static_cast<Index>(nb.members.size()), 0);
    const MatrixXd& loadings = fits ? (*fits)[static_cast<std::size_t>(i)].loadings : empty;
    const VectorXd target = fits ? own_loading(nb, (*fits)[static_cast<std::size_t>(i)]) : VectorXd();
    const auto design = build_local_design(sample, nb.members, loadings, target, i, level, response,
                                           eligible_only, options.add_intercept);
    out[static_cast<std::size_t>(i)] = fit_design(design, i, level, link, average_only, options);
  });
  return out;
}

void clip_all(std::vector<LocalFitRecord>& records, double clip) {
  for (auto& rec : records) {
    rec.unclipped = rec.fitted;
    const double clipped = std::clamp(rec.fitted, clip, 1.0 - clip);
    if (clipped != rec.fitted) rec.flags |= kFitClipped;
    rec.fitted = clipped;
  }
}

}  // namespace

std::vector<LocalFitRecord> fit_outcome_local_ls(const TreatmentSample& sample,
                                                 const std::vector<Neighborhood>& neighborhoods,
                                                 const std::vector<LocalFactorFit>& fits, int level,
                                                 const RegressionOptions& options) {
  return fit_all(sample, neighborhoods, &fits, level, Response::outcome, true, Link::identity, false, options);
}

std::vector<LocalFitRecord> fit_outcome_local_average(const TreatmentSample& sample,
                                                      const std::vector<Neighborhood>& neighborhoods, int level,
                                                      const RegressionOptions& options) {
  return fit_all(sample, neighborhoods, nullptr, level, Response::outcome, true, Link::identity, true, options);
}

std::vector<LocalFitRecord> fit_propensity(const TreatmentSample& sample,
                                           const std::vector<Neighborhood>& neighborhoods,
                                           const std::vector<LocalFactorFit>& fits, int level,
                                           PropensityBackend backend, const RegressionOptions& options) {
  if (!(options.p_clip >= 0.0 && options.p_clip < 0.5)) throw DataError("propensity clip must lie in [0, 0.5)");
  std::vector<LocalFitRecord> out;
  switch (backend) {
    case PropensityBackend::local_average:
      out = fit_all(sample, neighborhoods, nullptr, level, Response::indicator, false, Link::identity, true, options);
      break;
    case PropensityBackend::local_ls:
      out = fit_all(sample, neighborhoods, &fits, level, Response::indicator, false, Link::identity, false, options);
      break;
    case PropensityBackend::local_logit:
      out = fit_all(sample, neighborhoods, &fits, level, Response::indicator, false, Link::logit, false, options);
      break;
  }
  clip_all(out, options.p_clip);
  return out;
}

std::vector<LocalFitRecord> local_qmle(const TreatmentSample& sample, const std::vector<Neighborhood>& neighborhoods,
                                       const std::vector<LocalFactorFit>& fits, int level, Link link,
                                       const RegressionOptions& options) {
  return fit_all(sample, neighborhoods, &fits, level, Response::outcome, true, link, false, options);
}

std::string fit_dump_csv(const std::vector<LocalFitRecord>& records, const std::string& kind) {
  CsvWriter out({"unit", "level", "kind", "fitted", "unclipped", "n_used", "fallback_flag"});
  for (const auto& r : records) {
    out.add_row({std::to_string(r.unit), std::to_string(r.level), kind, format_double(r.fitted),
                 format_double(r.unclipped), std::to_string(r.n_used), std::to_string(r.flags)});
  }
  return out.str();
}

}  // namespace lpsa
