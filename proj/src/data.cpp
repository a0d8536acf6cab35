#include "lpsa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

namespace lpsa {

namespace {

void require_finite(const MatrixXd& m, const char* what) {
  for (Index c = 0; c < m.cols(); ++c) {
    for (Index r = 0; r < m.rows(); ++r) {
      if (!std::isfinite(m(r, c))) {
        throw DataError(std::string(what) + ": non-finite entry at row " + std::to_string(r) +
                        ", column " + std::to_string(c));
      }
    }
  }
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t k = 0; k < bytes; ++k) {
    h ^= p[k];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

MeasurementPanel::MeasurementPanel(MatrixXd x, std::vector<MatrixXd> w,
                                   std::vector<std::string> unit_ids,
                                   std::vector<std::string> row_ids)
    : x_(std::move(x)), w_(std::move(w)), unit_ids_(std::move(unit_ids)),
      row_ids_(std::move(row_ids)) {
  if (x_.rows() < 2 || x_.cols() < 2) {
    throw DataError("measurement panel needs T >= 2 and n >= 2, got " +
                    std::to_string(x_.rows()) + "x" + std::to_string(x_.cols()));
  }
  require_finite(x_, "measurement panel");
  for (const auto& wl : w_) {
    if (wl.rows() != x_.rows() || wl.cols() != x_.cols()) {
      throw DataError("high-rank covariate shape differs from the measurement panel");
    }
    require_finite(wl, "high-rank covariate");
  }
  if (unit_ids_.empty()) {
    for (Index i = 0; i < x_.cols(); ++i) unit_ids_.push_back(std::to_string(i));
  }
  if (row_ids_.empty()) {
    for (Index t = 0; t < x_.rows(); ++t) row_ids_.push_back(std::to_string(t));
  }
  if (static_cast<Index>(unit_ids_.size()) != x_.cols() ||
      static_cast<Index>(row_ids_.size()) != x_.rows()) {
    throw DataError("label count does not match panel shape");
  }
}

TreatmentSample::TreatmentSample(VectorXd y, std::vector<int> s, MatrixXd z, int num_levels)
    : y_(std::move(y)), s_(std::move(s)), z_(std::move(z)), num_levels_(num_levels) {
  const auto n = y_.size();
  if (num_levels_ < 1) throw DataError("at least one treatment level is required");
  if (static_cast<Index>(s_.size()) != n) throw DataError("treatment and outcome lengths differ");
  if (z_.cols() == 0) z_.resize(n, 0);
  if (z_.rows() != n) throw DataError("control matrix row count differs from sample size");
  for (Index i = 0; i < n; ++i) {
    if (!std::isfinite(y_(i))) throw DataError("non-finite outcome for unit " + std::to_string(i));
    const int level = s_[static_cast<std::size_t>(i)];
    if (level < 0 || level >= num_levels_) {
      throw DataError("treatment label " + std::to_string(level) + " for unit " +
                      std::to_string(i) + " outside 0.." + std::to_string(num_levels_ - 1));
    }
  }
  require_finite(z_, "controls");

  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a(h, y_.data(), sizeof(double) * static_cast<std::size_t>(n));
  h = fnv1a(h, s_.data(), sizeof(int) * s_.size());
  fingerprint_ = h;
}

Index TreatmentSample::count(int level) const {
  return std::count(s_.begin(), s_.end(), level);
}

void TreatmentSample::require_level(int level) const {
  if (level < 0 || level >= num_levels_) {
    throw DataError("treatment level " + std::to_string(level) + " outside 0.." +
                    std::to_string(num_levels_ - 1));
  }
  if (count(level) == 0) {
    throw DataError("no units observed at treatment level " + std::to_string(level));
  }
}

TreatmentSample TreatmentSample::with_outcome(VectorXd y) const {
  return TreatmentSample(std::move(y), s_, z_, num_levels_);
}

RowSplit make_row_split(Index periods, SplitScheme scheme, std::uint64_t seed) {
  std::vector<Index> order(static_cast<std::size_t>(std::max<Index>(periods, 0)));
  std::iota(order.begin(), order.end(), Index{0});
  RowSplit split;

  auto sorted_slice = [&](std::size_t from, std::size_t to) {
    std::vector<Index> part(order.begin() + static_cast<std::ptrdiff_t>(from),
                            order.begin() + static_cast<std::ptrdiff_t>(to));
    std::sort(part.begin(), part.end());
    return part;
  };

  if (scheme == SplitScheme::thirds) {
    if (periods < 6) throw DataError("three-way row split needs T >= 6");
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto third = order.size() / 3;
    split.matching = sorted_slice(0, third);
    split.pca = sorted_slice(third, 2 * third);
    split.third = sorted_slice(2 * third, order.size());
    return split;
  }

  if (periods < 4) throw DataError("two-way row split needs T >= 4");
  if (scheme == SplitScheme::random) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  const auto half = order.size() / 2;
  split.matching = sorted_slice(0, half);
  split.pca = sorted_slice(half, order.size());
  return split;
}

MatrixXd select_rows(const MatrixXd& m, const std::vector<Index>& rows) {
  MatrixXd out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = m.row(rows[r]);
  return out;
}

}  // namespace lpsa
