#pragma once

#include "avem/linalg.hpp"

#include <cstdint>
#include <vector>

namespace avem::hmm {

/// T x K matrix of log emission densities log e_{kt}; row t, column k.
using EmissionLogMatrix = MatrixXd;

/// Initial law and row-stochastic transition matrix of a K-state chain.
struct ChainParams {
  VectorXd pi;
  MatrixXd gamma;

  Index n_states() const { return pi.size(); }
  /// Throws DimensionError if shapes disagree or the simplex constraints
  /// fail (tolerance 1e-12 on the sums, entries >= 0).
  void validate() const;
};

/// Posterior marginals of a chain given fixed emissions.
struct StatePosterior {
  MatrixXd zeta;             // T x K, zeta(t, k) = p(U_t = k | D)
  std::vector<MatrixXd> xi;  // T-1 matrices, xi[t](k, l) = p(U_t = k, U_{t+1} = l | D)
  double log_marginal = 0.0; // log p(D | f, theta)

  Index length() const { return zeta.rows(); }
  Index n_states() const { return zeta.cols(); }
};

/// log alpha(t, k) = log p(U_t = k, D_{1:t}).
MatrixXd forward_pass(const EmissionLogMatrix& log_e, const ChainParams& chain);

/// log beta(t, k) = log p(D_{t+1:T} | U_t = k); last row is zero.
MatrixXd backward_pass(const EmissionLogMatrix& log_e, const ChainParams& chain);

/// logsumexp of the final forward row.
double conditional_log_marginal(const MatrixXd& log_alpha);

/// Combines forward and backward quantities into zeta, xi and the log
/// marginal. Throws NumericalError when every path has zero likelihood.
StatePosterior state_posteriors(const MatrixXd& log_alpha, const MatrixXd& log_beta,
                                const ChainParams& chain, const EmissionLogMatrix& log_e);

/// One forward and one backward pass.
StatePosterior forward_backward(const EmissionLogMatrix& log_e, const ChainParams& chain);

/// Entropy (nats) of the path distribution described by `post`, using the
/// Markov factorization H(U_1) + sum_t H(U_{t+1} | U_t).
double posterior_entropy(const StatePosterior& post);

/// Process-wide count of forward_pass calls (all threads).
std::uint64_t forward_pass_count();

}  // namespace avem::hmm
