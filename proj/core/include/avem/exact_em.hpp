#pragma once

#include "avem/dataset.hpp"
#include "avem/mhmm.hpp"

#include <cstdint>

namespace avem::exact {

enum class NodeKind { gauss_hermite, monte_carlo };

/// Support points of a discrete approximation to the prior N(0, tau^2 I).
/// Gauss-Hermite weights are positive and sum to 1; Monte Carlo weights are
/// all 1.
struct NodeSet {
  MatrixXd nodes;  // J x d
  VectorXd weights;
  NodeKind kind = NodeKind::gauss_hermite;

  Index size() const { return nodes.rows(); }
};

/// Tensor Gauss-Hermite rule for N(0, tau2 I_d); J = j_per_dim^d.
NodeSet gh_tensor_nodes(int j_per_dim, int d, double tau2);

/// m draws from N(0, tau2 I_d) using the given seed.
NodeSet mc_nodes(int m, int d, double tau2, std::uint64_t seed);

/// Row-normalized node posterior weights w_ij ~ v_j p(D_i | f_j).
struct PosteriorWeights {
  MatrixXd w_hat;     // n x J
  VectorXd log_lik;   // log sum_j v_j p(D_i | f_j) with v normalized to sum 1
};

/// One forward pass per node per subject. Throws NumericalError when every
/// node of a subject has zero likelihood.
PosteriorWeights posterior_weights(const mhmm::MhmmParams& params, const Dataset& data,
                                   const NodeSet& nodes, unsigned threads = 1);

/// Exact EM with the random-effect integral replaced by a tensor
/// Gauss-Hermite rule with j_per_dim nodes per dimension. Sigma is held
/// isotropic (tau^2 I). The trace holds the node-approximated
/// log-likelihood at the start of each iteration; q_factors hold the
/// discrete posterior mean and covariance of each f_i. Uses max_iter,
/// rel_tol, threads and update_sigma (tau^2 update) from `config`.
mhmm::FitReport fit_qem(const Dataset& data, const mhmm::MhmmParams& init, int j_per_dim,
                        const mhmm::AvemConfig& config);

/// Monte Carlo EM: m fresh prior draws per iteration from N(0, tau^2 I),
/// seeded by (config.seed, iteration).
mhmm::FitReport fit_mcem(const Dataset& data, const mhmm::MhmmParams& init, int m,
                         const mhmm::AvemConfig& config);

}  // namespace avem::exact
