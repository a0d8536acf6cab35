// Shared error types, seeding, and small numeric helpers.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lpsa {

using Index = Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Errors caused by the inputs: schema problems, bad shapes, invalid
// estimands. The CLI maps these to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failures of a numerical routine on otherwise valid inputs. Exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A local fit had no eligible observations at all.
class EstimationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// splitmix64 finalizer; used to derive independent per-task seeds from a
// master seed so that results do not depend on scheduling.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

// Runs body(i) for i in [0, count) on up to `threads` workers. Each index is
// processed exactly once; callers write results into preallocated slots.
// threads <= 0 means default_thread_count().
void parallel_for(Index count, int threads, const std::function<void(Index)>& body);

// Worker count from LPSA_THREADS, falling back to hardware concurrency.
int default_thread_count();

// Sample quantile with linear interpolation between order statistics
// (Hyndman-Fan type 7, the R default).
double quantile(std::vector<double> values, double prob);

// Compensated running sum.
class KahanSum {
 public:
  void add(double v) {
    const double y = v - carry_;
    const double t = total_ + y;
    carry_ = (t - total_) - y;
    total_ = t;
  }
  double value() const { return total_; }

 private:
  double total_ = 0.0;
  double carry_ = 0.0;
};

double binomial(int n, int k);

}  // namespace lpsa
