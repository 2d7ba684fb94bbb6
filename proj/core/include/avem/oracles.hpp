#pragma once

#include "avem/hmm.hpp"
#include "avem/kalman.hpp"
#include "avem/rng.hpp"

#include <functional>
#include <string>
#include <vector>

namespace avem::oracle {

/// Posterior marginals by enumerating all K^T state paths (K^T <= 1e6).
hmm::StatePosterior enumerate_paths(const MatrixXd& log_e, const hmm::ChainParams& chain);

/// Normalized mean and variance of exp(log_density) over [lo, hi] by
/// composite Simpson on `points` (odd) nodes.
struct GridMoments {
  double mean = 0.0;
  double variance = 0.0;
  double log_normalizer = 0.0;
};
GridMoments grid_moments(const std::function<double(double)>& log_density, double lo, double hi,
                         int points);

/// Random test instances.
hmm::ChainParams random_chain(Rng& rng, Index K);
kalman::LgssmSpec random_lgssm(Rng& rng, Index q, Index p);

struct SuiteReport {
  std::string suite;
  int instances = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const { return max_deviation < tolerance; }
};

/// zeta, xi, log-marginal against path enumeration, K <= 3, T <= 6.
SuiteReport validate_hmm(int instances, std::uint64_t seed);
/// Smoothed means, covariances and lag-one covariances against dense
/// joint-Gaussian conditioning, q = 2, p = 3, T = 5.
SuiteReport validate_kalman(int instances, std::uint64_t seed);
/// Closed-form Gaussian q update against dense-grid integration of the
/// tilted density (d = 1), and Laplace against the closed form.
SuiteReport validate_gaussian_estep(int instances, std::uint64_t seed);

std::vector<std::string> suite_names();
SuiteReport run_suite(const std::string& name, std::uint64_t seed);

}  // namespace avem::oracle
