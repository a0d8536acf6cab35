#include "lpsa/local_pca.hpp"

#include "lpsa/io.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace lpsa {

namespace {

// Gram matrices above this many units are not cached by local_pca_all.
constexpr Index kMaxCachedGram = 4000;

// Eigenvalues at or below this fraction of the leading one count as zero.
constexpr double kDegenerateRatio = 1e-10;

// Householder tridiagonalization, bisection for the top `count` eigenvalues
// of the tridiagonal matrix, inverse iteration for their vectors, then back
// transformation of only those vectors.
EigenPairs dense_leading(const MatrixXd& sym, Index count) {
  const Index m = sym.rows();
  EigenPairs out;
  if (m == 1) {
    out.values = sym.diagonal();
    out.vectors = MatrixXd::Ones(1, 1);
    return out;
  }
  const Eigen::Tridiagonalization<MatrixXd> tri(sym);
  VectorXd diag = tri.diagonal();
  VectorXd sub = tri.subDiagonal();
  const auto n = static_cast<lapack_int>(m);
  const auto lo = static_cast<lapack_int>(m - count + 1);
  const double abstol = 2.0 * LAPACKE_dlamch('S');
  VectorXd w(m);
  std::vector<lapack_int> block(static_cast<std::size_t>(m)), split(static_cast<std::size_t>(m));
  lapack_int found = 0, nsplit = 0;
  lapack_int info = LAPACKE_dstebz('I', 'E', n, 0.0, 0.0, lo, n, abstol, diag.data(), sub.data(), &found, &nsplit,
                                   w.data(), block.data(), split.data());
  if (info != 0 || found != static_cast<lapack_int>(count)) {
    throw NumericalError("symmetric eigensolver failed in bisection (info " + std::to_string(info) + ")");
  }
  MatrixXd z(m, count);
  std::vector<lapack_int> failed(static_cast<std::size_t>(count));
  info = LAPACKE_dstein(LAPACK_COL_MAJOR, n, diag.data(), sub.data(), found, w.data(), block.data(), split.data(),
                        z.data(), n, failed.data());
  if (info != 0) {
    throw NumericalError("symmetric eigensolver failed in inverse iteration (info " + std::to_string(info) + ")");
  }
  const MatrixXd vectors = tri.matrixQ() * z;
  out.values.resize(count);
  out.vectors.resize(m, count);
  for (Index c = 0; c < count; ++c) {
    out.values(c) = w(count - 1 - c);
    out.vectors.col(c) = vectors.col(count - 1 - c);
  }
  return out;
}

EigenPairs subspace_leading(const MatrixXd& sym, Index count, const EigenSolverOptions& options) {
  const Index m = sym.rows();
  const Index block = std::min<Index>(m, count + 8);
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd q(m, block);
  for (Index c = 0; c < block; ++c) {
    for (Index r = 0; r < m; ++r) q(r, c) = normal(rng);
  }
  q = Eigen::HouseholderQR<MatrixXd>(q).householderQ() * MatrixXd::Identity(m, block);

  EigenPairs out;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    const MatrixXd mq = sym * q;
    const MatrixXd h = q.transpose() * mq;
    Eigen::SelfAdjointEigenSolver<MatrixXd> small(0.5 * (h + h.transpose()));
    const VectorXd theta = small.eigenvalues().reverse();
    const MatrixXd rot = small.eigenvectors().rowwise().reverse();
    const MatrixXd ritz = q * rot;
    const MatrixXd image = mq * rot;

    const double scale = std::max(std::abs(theta(0)), std::numeric_limits<double>::min());
    double worst = 0.0;
    for (Index c = 0; c < count; ++c) {
      worst = std::max(worst, (image.col(c) - theta(c) * ritz.col(c)).norm() / scale);
    }
    if (worst <= options.tolerance * std::sqrt(static_cast<double>(m)) || block == m) {
      out.values = theta.head(count);
      out.vectors = ritz.leftCols(count);
      if (block == m) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> full(sym);
        out.values = full.eigenvalues().reverse().head(count);
        out.vectors = full.eigenvectors().rowwise().reverse().leftCols(count);
      }
      return out;
    }
    q = Eigen::HouseholderQR<MatrixXd>(image).householderQ() * MatrixXd::Identity(m, block);
  }
  throw NumericalError("subspace iteration did not converge");
}

// Extends the columns of `f` (already scaled so (1/T)F'F = I on the first
// `filled` columns) to an orthonormal set using coordinate directions.
void complete_factors(MatrixXd& f, Index filled) {
  const Index rows = f.rows();
  const double scale = std::sqrt(static_cast<double>(rows));
  Index next_axis = 0;
  for (Index c = filled; c < f.cols(); ++c) {
    for (; next_axis < rows; ++next_axis) {
      VectorXd v = VectorXd::Unit(rows, next_axis);
      for (Index p = 0; p < c; ++p) {
        const VectorXd u = f.col(p) / scale;
        v -= u.dot(v) * u;
      }
      if (v.norm() > 1e-6) {
        f.col(c) = scale * v.normalized();
        ++next_axis;
        break;
      }
    }
  }
}

void normalize_signs(LocalFactorFit& fit) {
  for (Index c = 0; c < fit.factors.cols(); ++c) {
    Index arg = 0;
    double best = -1.0;
    for (Index t = 0; t < fit.factors.rows(); ++t) {
      const double a = std::abs(fit.factors(t, c));
      if (a > best) {
        best = a;
        arg = t;
      }
    }
    if (fit.factors(arg, c) < 0.0) {
      fit.factors.col(c) *= -1.0;
      fit.loadings.col(c) *= -1.0;
    }
  }
}

}  // namespace

EigenPairs leading_eigenpairs(const MatrixXd& symmetric, Index count, const EigenSolverOptions& options) {
  if (count < 1 || count > symmetric.rows()) {
    throw DataError("requested " + std::to_string(count) + " eigenpairs of a " +
                    std::to_string(symmetric.rows()) + "-dimensional matrix");
  }
  if (options.kind == EigenSolverKind::dense) return dense_leading(symmetric, count);
  return subspace_leading(symmetric, count, options);
}

MatrixXd neighborhood_block(const MatrixXd& x_pca, const std::vector<Index>& members) {
  MatrixXd block(x_pca.rows(), static_cast<Index>(members.size()));
  for (std::size_t k = 0; k < members.size(); ++k) block.col(static_cast<Index>(k)) = x_pca.col(members[k]);
  return block;
}

LocalFactorFit local_pca_block(const MatrixXd& block, Index d_lambda, const EigenSolverOptions& options,
                               const MatrixXd* local_gram) {
  const Index rows = block.rows();
  const Index k = block.cols();
  if (d_lambda < 1 || d_lambda > std::min(rows, k)) {
    throw DataError("d_lambda = " + std::to_string(d_lambda) + " exceeds the rank bound min(T, K) = " +
                    std::to_string(std::min(rows, k)));
  }
  const double tk = static_cast<double>(rows) * static_cast<double>(k);
  LocalFactorFit fit;
  fit.factors.resize(rows, d_lambda);
  fit.loadings.resize(k, d_lambda);
  fit.eigenvalues.resize(d_lambda);

  if (k <= rows) {
    const MatrixXd cross = local_gram ? *local_gram : MatrixXd(block.transpose() * block);
    const EigenPairs eig = leading_eigenpairs(cross / tk, d_lambda, options);
    const double top = std::max(eig.values(0), 0.0);
    Index filled = 0;
    for (Index c = 0; c < d_lambda; ++c) {
      const double v = eig.values(c);
      if (top > 0.0 && v > kDegenerateRatio * top) {
        const double root = std::sqrt(static_cast<double>(k) * v);
        fit.loadings.col(c) = root * eig.vectors.col(c);
        fit.factors.col(c) = block * eig.vectors.col(c) / root;
        fit.eigenvalues(c) = v;
        ++filled;
      } else {
        fit.loadings.col(c).setZero();
        fit.eigenvalues(c) = 0.0;
        fit.degenerate = true;
      }
    }
    if (filled < d_lambda) complete_factors(fit.factors, filled);
  } else {
    const MatrixXd outer = block * block.transpose();
    const EigenPairs eig = leading_eigenpairs(outer / tk, d_lambda, options);
    const double top = std::max(eig.values(0), 0.0);
    const double scale = std::sqrt(static_cast<double>(rows));
    for (Index c = 0; c < d_lambda; ++c) {
      fit.factors.col(c) = scale * eig.vectors.col(c);
      const double v = eig.values(c);
      if (top > 0.0 && v > kDegenerateRatio * top) {
        fit.loadings.col(c) = block.transpose() * fit.factors.col(c) / static_cast<double>(rows);
        fit.eigenvalues(c) = v;
      } else {
        fit.loadings.col(c).setZero();
        fit.eigenvalues(c) = 0.0;
        fit.degenerate = true;
      }
    }
  }
  normalize_signs(fit);
  return fit;
}

LocalFactorFit local_pca(const MatrixXd& x_pca, const Neighborhood& nbhd, Index d_lambda,
                         const EigenSolverOptions& options, const MatrixXd* gram) {
  const MatrixXd block = neighborhood_block(x_pca, nbhd.members);
  try {
    if (gram && block.cols() <= block.rows()) {
      const auto k = static_cast<Index>(nbhd.members.size());
      MatrixXd local(k, k);
      for (Index b = 0; b < k; ++b) {
        for (Index a = 0; a < k; ++a) local(a, b) = (*gram)(nbhd.members[a], nbhd.members[b]);
      }
      return local_pca_block(block, d_lambda, options, &local);
    }
    return local_pca_block(block, d_lambda, options);
  } catch (const NumericalError& e) {
    throw NumericalError("local PCA for neighborhood of unit " + std::to_string(nbhd.center) + ": " +
                         e.what());
  }
}

std::vector<LocalFactorFit> local_pca_all(const MatrixXd& x_pca, const std::vector<Neighborhood>& neighborhoods,
                                          Index d_lambda, int threads, const EigenSolverOptions& options) {
  std::vector<LocalFactorFit> fits(neighborhoods.size());
  MatrixXd gram;
  const bool cache = x_pca.cols() <= kMaxCachedGram && !neighborhoods.empty() &&
                     static_cast<Index>(neighborhoods.front().members.size()) <= x_pca.rows();
  if (cache) gram = x_pca.transpose() * x_pca;
  parallel_for(static_cast<Index>(neighborhoods.size()), threads, [&](Index i) {
    fits[static_cast<std::size_t>(i)] =
        local_pca(x_pca, neighborhoods[static_cast<std::size_t>(i)], d_lambda, options, cache ? &gram : nullptr);
  });
  return fits;
}

MatrixXd common_component(const LocalFactorFit& fit) { return fit.factors * fit.loadings.transpose(); }

VectorXd EigenDiagnostics::mean_spectrum() const { return leading_eigenvalues.colwise().mean().transpose(); }

EigenDiagnostics eigen_diagnostics(const MatrixXd& x_pca, const std::vector<Neighborhood>& neighborhoods,
                                   const std::vector<Index>& units, Index q) {
  EigenDiagnostics diag;
  diag.units = units;
  if (units.empty()) throw DataError("eigen diagnostics need at least one unit");
  Index width = q;
  for (Index u : units) {
    const auto& nb = neighborhoods.at(static_cast<std::size_t>(u));
    width = std::min<Index>(width, std::min<Index>(x_pca.rows(), static_cast<Index>(nb.members.size())));
  }
  if (width < 1) throw DataError("eigen diagnostics need q >= 1");
  diag.leading_eigenvalues.resize(static_cast<Index>(units.size()), width);
  diag.gap_ratios.resize(static_cast<Index>(units.size()), std::max<Index>(width - 1, 0));
  for (std::size_t r = 0; r < units.size(); ++r) {
    const auto& nb = neighborhoods[static_cast<std::size_t>(units[r])];
    const MatrixXd block = neighborhood_block(x_pca, nb.members);
    const double tk = static_cast<double>(block.rows()) * static_cast<double>(block.cols());
    const MatrixXd m = block.cols() <= block.rows() ? MatrixXd(block.transpose() * block / tk)
                                                    : MatrixXd(block * block.transpose() / tk);
    const EigenPairs eig = leading_eigenpairs(m, width);
    for (Index c = 0; c < width; ++c) {
      diag.leading_eigenvalues(static_cast<Index>(r), c) = std::max(eig.values(c), 0.0);
    }
    for (Index c = 0; c + 1 < width; ++c) {
      const double below = diag.leading_eigenvalues(static_cast<Index>(r), c + 1);
      diag.gap_ratios(static_cast<Index>(r), c) =
          below > 0.0 ? diag.leading_eigenvalues(static_cast<Index>(r), c) / below
                      : std::numeric_limits<double>::infinity();
    }
  }
  return diag;
}

std::string scree_csv(const EigenDiagnostics& diag) {
  CsvWriter out({"unit", "rank", "eigenvalue", "ratio_to_next"});
  for (Index r = 0; r < diag.leading_eigenvalues.rows(); ++r) {
    for (Index c = 0; c < diag.leading_eigenvalues.cols(); ++c) {
      const std::string ratio = c < diag.gap_ratios.cols() ? format_double(diag.gap_ratios(r, c)) : "";
      out.add_row({std::to_string(diag.units[static_cast<std::size_t>(r)]), std::to_string(c + 1),
                   format_double(diag.leading_eigenvalues(r, c)), ratio});
    }
  }
  return out.str();
}

LatentCountEstimate estimate_num_latent(const VectorXd& spectrum, double ratio_threshold) {
  if (spectrum.size() < 3) throw DataError("estimating d_alpha needs at least three eigenvalues");
  if (!(ratio_threshold > 1.0)) throw DataError("eigenvalue ratio threshold must exceed 1");
  LatentCountEstimate est{std::nullopt, spectrum};
  for (Index j = 1; j + 1 < spectrum.size(); ++j) {
    const double below = spectrum(j + 1);
    const double ratio = below > 0.0 ? spectrum(j) / below : std::numeric_limits<double>::infinity();
    if (ratio > ratio_threshold) {
      est.d_alpha = j;
      break;
    }
  }
  return est;
}

LatentCountEstimate estimate_num_latent(const EigenDiagnostics& diag, double ratio_threshold) {
  return estimate_num_latent(diag.mean_spectrum(), ratio_threshold);
}

namespace {

FactorCountChoice cap(Index value, Index rank_bound) {
  if (rank_bound > 0 && value > rank_bound) return {rank_bound, true};
  return {value, false};
}

}  // namespace

FactorCountChoice select_num_factors(const FixedOrder& mode, Index rank_bound) {
  if (mode.d_alpha < 1 || mode.m < 1) throw DataError("fixed-order selection needs d_alpha >= 1 and m >= 1");
  return cap(static_cast<Index>(binomial(mode.m - 1 + mode.d_alpha, mode.d_alpha)), rank_bound);
}

FactorCountChoice select_num_factors(const BiasMinimizing& mode, const EigenDiagnostics& diag, Index rank_bound) {
  const VectorXd spectrum = diag.mean_spectrum();
  if (spectrum.size() < 2) throw DataError("bias-minimizing selection needs at least two eigenvalues");
  const Index half = spectrum.size() / 2;
  std::vector<double> tail(spectrum.data() + half, spectrum.data() + spectrum.size());
  const double floor = quantile(tail, 0.5);
  Index count = 0;
  for (Index c = 0; c < spectrum.size(); ++c) {
    if (spectrum(c) > mode.threshold * floor) ++count;
  }
  return cap(std::max<Index>(count, 1), rank_bound);
}

}  // namespace lpsa
