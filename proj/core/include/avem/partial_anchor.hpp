#pragma once

#include "avem/dataset.hpp"
#include "avem/emission.hpp"
#include "avem/mhmm.hpp"

#include <vector>

namespace avem::pavem {

/// D_t | U_t = k, f ~ N(mu_k + f_a + f_b 1(t < t0), sigma2_k I_p) with
/// f = (f_a, f_b): f_b affects only the first t0 observations (zero-based
/// t < t0). tau_a2 and tau_b2 record the prior variances.
class LocalizedGaussianEmission final : public LinearGaussianEmission {
 public:
  LocalizedGaussianEmission(MatrixXd mu, VectorXd sigma2, Index t0, double tau_a2, double tau_b2);

  std::string name() const override { return "localized_gaussian"; }
  Index effect_dim() const override { return 2; }
  MatrixXd design(Index t) const override;
  VectorXd shift(Index t, const VectorXd& f) const override;
  std::unique_ptr<LinearGaussianEmission> with_parameters(MatrixXd mu,
                                                          VectorXd sigma2) const override;
  std::unique_ptr<EmissionModel> clone() const override;

  Index t0() const { return t0_; }
  double tau_a2() const { return tau_a2_; }
  double tau_b2() const { return tau_b2_; }

 private:
  Index t0_;
  double tau_a2_;
  double tau_b2_;
};

/// Anchored part: a mixed HMM with a one-dimensional Gaussian emission for
/// f_a (sigma = tau_a^2); localized part: cutoff t0 and prior variance
/// tau_b^2 of f_b.
struct PavemParams {
  mhmm::MhmmParams base;
  Index t0 = 0;
  double tau_b2 = 1.0;

  void validate() const;
};

/// Discrete factor q(f_b) on prior-centered Gauss-Hermite nodes.
struct GridFactor {
  VectorXd nodes;
  VectorXd weights;  // normalized posterior weights

  double mean() const { return nodes.dot(weights); }
};

/// Nodes sqrt(tau_b2) x_j of a J-point rule and weights proportional to
/// v_j p(D | f_a = f0_a, f_b = node_j), one forward pass per node.
GridFactor update_grid_factor(const PavemParams& params, const MatrixXd& seq, double f0_a, int J);

/// T x K log emissions at f_a = fa, f_b = fb.
MatrixXd localized_log_emissions(const PavemParams& params, const MatrixXd& seq, double fa,
                                 double fb);

struct PavemConfig {
  mhmm::AvemConfig avem;  // max_iter, rel_tol, threads, update_sigma
  int n_nodes = 9;
  bool update_tau_b2 = true;
};

struct PavemReport {
  mhmm::FitReport fit;  // q_factors are q(f_a); forward_passes count n J per iteration
  std::vector<GridFactor> grids;
  std::vector<double> fb_hat;  // grid means
  double tau_b2 = 0.0;
};

/// Partially anchored variational EM: anchor f_a at its previous variational
/// mean, integrate f_b over the grid with node-wise state posteriors, update
/// q(f_a) in closed form from the mixture statistics, then the M-step.
PavemReport fit_pavem(const Dataset& data, const PavemParams& init, const PavemConfig& config);

}  // namespace avem::pavem
