#include "doctest.h"
#include "lpsa/local_pca.hpp"
#include "lpsa/matching.hpp"
#include "oracles.hpp"

#include <Eigen/SVD>

using namespace lpsa;

namespace {

MatrixXd svd_truncation(const MatrixXd& x, Index r) {
  Eigen::JacobiSVD<MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& u = svd.matrixU();
  const auto& v = svd.matrixV();
  return u.leftCols(r) * svd.singularValues().head(r).asDiagonal() * v.leftCols(r).transpose();
}

void check_normalization(const LocalFactorFit& fit, double tol) {
  const double periods = static_cast<double>(fit.factors.rows());
  const double k = static_cast<double>(fit.loadings.rows());
  const Index d = fit.factors.cols();
  const MatrixXd ff = fit.factors.transpose() * fit.factors / periods;
  CHECK((ff - MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() <= tol);
  const MatrixXd ll = fit.loadings.transpose() * fit.loadings / k;
  MatrixXd off = ll;
  off.diagonal().setZero();
  CHECK(off.cwiseAbs().maxCoeff() <= tol * std::max(1.0, fit.eigenvalues(0)));
  CHECK((ll.diagonal() - fit.eigenvalues).cwiseAbs().maxCoeff() <= tol * std::max(1.0, fit.eigenvalues(0)));
  for (Index j = 1; j < d; ++j) CHECK(fit.eigenvalues(j) <= fit.eigenvalues(j - 1));
}

}  // namespace

TEST_CASE("two-by-two example") {
  MatrixXd x(2, 2);
  x << 2, 0, 0, 0;
  const auto fit = local_pca_block(x, 1);
  CHECK(fit.eigenvalues(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(fit.factors(0, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-14));
  CHECK(std::abs(fit.factors(1, 0)) < 1e-14);
}

TEST_CASE("noiseless rank-1 block is reproduced") {
  const VectorXd f = oracle::gaussian_matrix(12, 1, 1).col(0);
  const VectorXd l = oracle::gaussian_matrix(8, 1, 2).col(0);
  const MatrixXd x = f * l.transpose();
  const auto fit = local_pca_block(x, 1);
  CHECK((common_component(fit) - x).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("truncation matches the SVD oracle") {
  for (auto [rows, cols, r] : {std::tuple<Index, Index, Index>{60, 40, 3}, {30, 20, 2}, {15, 45, 4}}) {
    const MatrixXd x = oracle::gaussian_matrix(rows, cols, static_cast<std::uint64_t>(rows + r));
    for (auto kind : {EigenSolverKind::dense, EigenSolverKind::subspace_iteration}) {
      const auto fit = local_pca_block(x, r, {kind, 3});
      CHECK((common_component(fit) - svd_truncation(x, r)).cwiseAbs().maxCoeff() < 1e-8);
      check_normalization(fit, 1e-8);
    }
  }
}

TEST_CASE("full rank reconstruction") {
  const MatrixXd x = oracle::gaussian_matrix(6, 9, 4);
  const auto fit = local_pca_block(x, 6);
  CHECK((common_component(fit) - x).cwiseAbs().maxCoeff() < 1e-8);
  CHECK_THROWS_AS(local_pca_block(x, 7), DataError);
}

TEST_CASE("zero components are flagged degenerate") {
  const VectorXd f = VectorXd::LinSpaced(5, 1.0, 2.0);
  const MatrixXd x = f * VectorXd::Ones(4).transpose();
  const auto fit = local_pca_block(x, 3);
  CHECK(fit.degenerate);
  CHECK(fit.loadings.rightCols(2).isZero(0.0));
  CHECK((common_component(fit) - x).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("sign convention makes the largest factor entry positive") {
  const MatrixXd x = oracle::gaussian_matrix(20, 10, 17);
  const auto a = local_pca_block(x, 3);
  const auto b = local_pca_block(-x, 3);
  for (Index j = 0; j < 3; ++j) {
    Index arg = 0;
    a.factors.col(j).cwiseAbs().maxCoeff(&arg);
    CHECK(a.factors(arg, j) > 0.0);
  }
  CHECK((a.factors - b.factors).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((a.loadings + b.loadings).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("truncation is optimal against random rank-d probes") {
  const MatrixXd x = oracle::gaussian_matrix(25, 18, 6);
  const auto fit = local_pca_block(x, 2);
  const double best = (x - common_component(fit)).squaredNorm();
  for (std::uint64_t s = 0; s < 100; ++s) {
    const MatrixXd a = oracle::gaussian_matrix(25, 2, 100 + s);
    const MatrixXd b = oracle::gaussian_matrix(18, 2, 300 + s);
    // least-squares B for the probe A keeps the probes competitive
    const MatrixXd bopt = (a.transpose() * a).ldlt().solve(a.transpose() * x).transpose();
    CHECK(best <= (x - a * b.transpose()).squaredNorm() + 1e-6);
    CHECK(best <= (x - a * bopt.transpose()).squaredNorm() + 1e-6);
  }
}

TEST_CASE("neighborhood fits agree with and without the global Gram") {
  const MatrixXd x = oracle::gaussian_matrix(30, 25, 9);
  const auto nbs = knn(x, 8, {});
  const MatrixXd gram = x.transpose() * x;
  for (const auto& nb : nbs) {
    const auto a = local_pca(x, nb, 2);
    const auto b = local_pca(x, nb, 2, {}, &gram);
    CHECK((common_component(a) - common_component(b)).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((a.loadings - b.loadings).cwiseAbs().maxCoeff() < 1e-8);
  }
  CHECK(neighborhood_block(x, nbs[3].members).cols() == 8);
}

TEST_CASE("solver restarts leave the common component unchanged") {
  const MatrixXd x = oracle::gaussian_matrix(40, 60, 12);
  const auto nbs = knn(x, 20, {});
  for (std::size_t i = 0; i < nbs.size(); i += 6) {
    const auto a = local_pca(x, nbs[i], 3, {EigenSolverKind::subspace_iteration, 1});
    const auto b = local_pca(x, nbs[i], 3, {EigenSolverKind::subspace_iteration, 2});
    const auto c = local_pca(x, nbs[i], 3, {EigenSolverKind::dense, 0});
    CHECK((common_component(a) - common_component(b)).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((common_component(a) - common_component(c)).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("leading eigenpairs are accurate for mid-size matrices") {
  // Regression guard: some optimized LAPACK builds return wrong subset
  // eigenvectors once the dimension passes 128.
  for (Index m : {20, 144, 300}) {
    const MatrixXd a = oracle::gaussian_matrix(m, m + 5, static_cast<std::uint64_t>(m));
    const MatrixXd s = a * a.transpose() / static_cast<double>(m);
    const auto pairs = leading_eigenpairs(s, 4);
    Eigen::SelfAdjointEigenSolver<MatrixXd> ref(s);
    for (Index j = 0; j < 4; ++j) {
      const double want = ref.eigenvalues()(m - 1 - j);
      CHECK(pairs.values(j) == doctest::Approx(want).epsilon(1e-10));
      const VectorXd v = pairs.vectors.col(j);
      CHECK(std::abs(v.norm() - 1.0) < 1e-10);
      CHECK((s * v - pairs.values(j) * v).norm() < 1e-9 * std::max(1.0, pairs.values(0)));
    }
  }
}

TEST_CASE("local_pca_all covers every neighborhood") {
  const MatrixXd x = oracle::gaussian_matrix(20, 30, 5);
  const auto nbs = knn(x, 10, {});
  const auto fits = local_pca_all(x, nbs, 2, 3);
  REQUIRE(fits.size() == 30);
  for (const auto& f : fits) {
    CHECK(f.loadings.rows() == 10);
    check_normalization(f, 1e-8);
  }
}

TEST_CASE("estimate_num_latent tier rule") {
  VectorXd a(5);
  a << 10, 1, 0.9, 0.01, 0.009;
  CHECK(estimate_num_latent(a, 5.0).d_alpha == Index{2});
  VectorXd b(3);
  b << 10, 1, 0.02;
  CHECK(estimate_num_latent(b, 5.0).d_alpha == Index{1});
  VectorXd c(4);
  c << 1, 0.99, 0.98, 0.97;
  const auto none = estimate_num_latent(c, 5.0);
  CHECK_FALSE(none.d_alpha.has_value());
  CHECK(none.spectrum.size() == 4);
  CHECK_THROWS_AS(estimate_num_latent(VectorXd::Ones(2), 5.0), DataError);
  CHECK_THROWS_AS(estimate_num_latent(a, 1.0), DataError);
}

TEST_CASE("fixed order factor counts") {
  CHECK(select_num_factors(FixedOrder{2, 2}).d_lambda == 3);
  CHECK(select_num_factors(FixedOrder{1, 2}).d_lambda == 2);
  CHECK(select_num_factors(FixedOrder{3, 3}).d_lambda == 10);
  const auto capped = select_num_factors(FixedOrder{3, 3}, 6);
  CHECK(capped.d_lambda == 6);
  CHECK(capped.capped);
}

TEST_CASE("eigen diagnostics and bias-minimizing count") {
  // three strong directions plus noise
  const MatrixXd f = oracle::gaussian_matrix(80, 3, 1);
  const MatrixXd l = oracle::gaussian_matrix(3, 60, 2);
  const MatrixXd x = 3.0 * f * l + 0.05 * oracle::gaussian_matrix(80, 60, 3);
  const auto nbs = knn(x, 30, {});
  const auto diag = eigen_diagnostics(x, nbs, {0, 5, 10}, 10);
  CHECK(diag.leading_eigenvalues.rows() == 3);
  CHECK(diag.leading_eigenvalues.cols() == 10);
  CHECK(diag.gap_ratios.cols() == 9);
  for (Index r = 0; r < 3; ++r)
    for (Index j = 1; j < 10; ++j) CHECK(diag.leading_eigenvalues(r, j) <= diag.leading_eigenvalues(r, j - 1));
  const VectorXd mean = diag.mean_spectrum();
  CHECK(mean.size() == 10);
  CHECK(select_num_factors(BiasMinimizing{5.0}, diag).d_lambda == 3);

  // direct oracle for one unit
  const MatrixXd block = neighborhood_block(x, nbs[5].members);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(block.transpose() * block / (80.0 * 30.0));
  CHECK(diag.leading_eigenvalues(1, 0) == doctest::Approx(es.eigenvalues()(29)).epsilon(1e-10));
  CHECK(scree_csv(diag).find("unit") != std::string::npos);
}

TEST_CASE("stress run keeps normalization on every neighborhood") {
  const MatrixXd x = oracle::gaussian_matrix(50, 1000, 77);
  const auto nbs = knn(x, 40, {});
  const auto fits = local_pca_all(x, nbs, 3);
  for (const auto& f : fits) check_normalization(f, 1e-8);
}
