// Dataset, split, and result types shared by every pipeline stage.
//
// Conventions: the measurement panel is T x n with one column per unit, so
// every per-unit operation indexes columns. Treatment levels are 0..J.
#pragma once

#include "lpsa/common.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace lpsa {

class MeasurementPanel {
 public:
  // Throws DataError on T < 2, n < 2, non-finite entries, label count
  // mismatches, or high-rank covariates whose shape differs from x.
  MeasurementPanel(MatrixXd x, std::vector<MatrixXd> w = {},
                   std::vector<std::string> unit_ids = {},
                   std::vector<std::string> row_ids = {});

  const MatrixXd& x() const { return x_; }
  const std::vector<MatrixXd>& w() const { return w_; }
  const std::vector<std::string>& unit_ids() const { return unit_ids_; }
  const std::vector<std::string>& row_ids() const { return row_ids_; }

  Index periods() const { return x_.rows(); }
  Index units() const { return x_.cols(); }
  bool has_high_rank() const { return !w_.empty(); }

 private:
  MatrixXd x_;
  std::vector<MatrixXd> w_;
  std::vector<std::string> unit_ids_;
  std::vector<std::string> row_ids_;
};

class TreatmentSample {
 public:
  // num_levels = J + 1. Labels outside 0..J raise DataError. z may have zero
  // columns.
  TreatmentSample(VectorXd y, std::vector<int> s, MatrixXd z, int num_levels);

  const VectorXd& y() const { return y_; }
  const std::vector<int>& s() const { return s_; }
  const MatrixXd& z() const { return z_; }
  Index size() const { return y_.size(); }
  Index controls() const { return z_.cols(); }
  int num_levels() const { return num_levels_; }

  double d(Index i, int level) const { return s_[static_cast<std::size_t>(i)] == level ? 1.0 : 0.0; }
  Index count(int level) const;

  // Throws DataError unless level is in range and observed at least once.
  void require_level(int level) const;

  // Same sample with the outcome replaced (used for distribution
  // regressions on 1(y <= tau)).
  TreatmentSample with_outcome(VectorXd y) const;

  // Identifies the sample for cross-estimate contract checks.
  std::uint64_t fingerprint() const { return fingerprint_; }

 private:
  VectorXd y_;
  std::vector<int> s_;
  MatrixXd z_;
  int num_levels_;
  std::uint64_t fingerprint_ = 0;
};

// Disjoint row index sets. Matching uses `matching`, local PCA uses `pca`;
// `third` is populated only for the three-way split of the high-rank flow.
struct RowSplit {
  std::vector<Index> matching;
  std::vector<Index> pca;
  std::vector<Index> third;
};

enum class SplitScheme { random, contiguous_halves, thirds };

// random and contiguous_halves need T >= 4; thirds needs T >= 6. Halves
// differ in size by at most one (the second part takes the extra row). For
// thirds the remainder goes to the third part. Index sets are sorted.
RowSplit make_row_split(Index periods, SplitScheme scheme, std::uint64_t seed = 0);

// Rows of `m` selected by `rows`, in the given order.
MatrixXd select_rows(const MatrixXd& m, const std::vector<Index>& rows);

struct Neighborhood {
  Index center = 0;
  std::vector<Index> members;  // ascending unit indices, contains center
  double radius = 0.0;
  double normalized_discrepancy = 0.0;
};

struct LocalFactorFit {
  MatrixXd factors;      // T'' x d_lambda, (1/T'') F'F = I
  MatrixXd loadings;     // K x d_lambda, rows follow Neighborhood::members
  VectorXd eigenvalues;  // diag((1/K) L'L), nonincreasing
  bool degenerate = false;
};

// Per-unit, per-level nuisance estimates. Columns for levels that were not
// fitted hold NaN.
struct NuisanceFits {
  MatrixXd varsigma;      // n x (J+1) outcome means
  MatrixXd p;             // n x (J+1) clipped propensities
  MatrixXd p_unclipped;   // n x (J+1) values before clipping
  VectorXd p_marginal;    // J+1 sample shares
};

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

struct DrEstimate {
  int level = 0;        // j: potential outcome level
  int group = 0;        // j': conditioning treatment group
  double theta = 0.0;
  double sigma = 0.0;
  VectorXd influence;
  Interval ci95;
  std::uint64_t sample_fingerprint = 0;
  double clipped_share = 0.0;  // share of level-j units whose propensity was clipped
  bool clipping_warning = false;
};

struct CdfProcess {
  int level = 0;
  int group = 0;
  std::vector<double> tau;
  VectorXd theta_raw;
  VectorXd theta;       // monotonized and clipped to [0, 1]
  MatrixXd influence;   // n x |tau|
  VectorXd sigma;       // per-tau standard deviation of the influence values
  VectorXd band_lower;
  VectorXd band_upper;
  std::uint64_t sample_fingerprint = 0;
};

}  // namespace lpsa
