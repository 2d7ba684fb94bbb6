#pragma once

#include "avem/dataset.hpp"
#include "avem/kalman.hpp"
#include "avem/mhmm.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace avem::messm {

using mhmm::QFactor;

/// Global parameters of the mixed-effects state-space model
///   U_1 ~ N(m0, P0),  U_t = G_i U_{t-1} + w_t,  w_t ~ N(0, I_q),
///   D_t = H_i U_t + v_t,  v_t ~ N(0, diag(r)),
///   vec(G_i) ~ N(mu_g, Sigma_g),  vecl(H_i) ~ N(mu_h, Sigma_h).
struct MessmParams {
  VectorXd m0;
  MatrixXd P0;
  VectorXd r;
  VectorXd mu_g;
  MatrixXd sigma_g;
  VectorXd mu_h;
  MatrixXd sigma_h;

  Index state_dim() const { return m0.size(); }
  Index obs_dim() const { return r.size(); }
  MatrixXd mean_G() const;
  MatrixXd mean_H() const;
  void validate() const;
};

struct SubjectEffects {
  QFactor q_g;
  QFactor q_h;
  VectorXd g0;
  VectorXd h0;
};

/// Number of free entries of a p x q lower-trapezoidal matrix.
Index vecl_size(Index p, Index q);

/// pq x L_h 0/1 matrix with vec(H) = S_H vecl(H); vecl stacks the free
/// lower-trapezoidal entries column by column.
MatrixXd build_s_h(Index p, Index q);

VectorXd vec(const MatrixXd& a);
MatrixXd unvec(const VectorXd& v, Index rows, Index cols);
VectorXd vecl(const MatrixXd& h);
MatrixXd unvecl(const VectorXd& h, Index p, Index q);

/// LGSSM with G = unvec(g0), H = unvecl(h0) and the global (m0, P0, r).
kalman::LgssmSpec anchored_spec(const MessmParams& params, const VectorXd& g0,
                                const VectorXd& h0);

/// One filter + smoother pass under the anchor.
kalman::SmootherMoments anchored_smoother(const MessmParams& params, const MatrixXd& seq,
                                          const VectorXd& g0, const VectorXd& h0,
                                          double* log_likelihood = nullptr);

/// Lambda_g = Sigma_g^{-1} + sum_{t>=2} Q_{t-1} (x) I_q,
/// eta_g = Sigma_g^{-1} mu_g + sum_{t>=2} vec(Q_{t,t-1}).
QFactor update_q_g(const MessmParams& params, const kalman::SmootherMoments& moments);

/// Lambda_h = Sigma_h^{-1} + S_H^T (sum_t Q_t (x) R^{-1}) S_H,
/// eta_h = Sigma_h^{-1} mu_h + S_H^T sum_t m_t (x) R^{-1} D_t.
QFactor update_q_h(const MessmParams& params, const kalman::SmootherMoments& moments,
                   const MatrixXd& seq);

/// Closed-form M-step over (mu, Sigma) blocks, (m0, P0) and diagonal R.
/// `shape` supplies dimensions only.
MessmParams m_step_messm(const MessmParams& shape, const std::vector<SubjectEffects>& effects,
                         const std::vector<kalman::SmootherMoments>& moments,
                         const Dataset& data);

/// Negates latent coordinate c for one subject: column c of H (entries of
/// nu_h, rows/columns of Omega_h), row and column c of G (through
/// S (x) S on nu_g, Omega_g), coordinate c of the smoothed moments. The
/// anchors are transformed the same way.
void flip_coordinate(Index c, Index p, Index q, SubjectEffects& effects,
                     kalman::SmootherMoments& moments);

struct SignAlignment {
  std::vector<Index> flipped;
  std::vector<Index> skipped;  // zero-norm columns
};

/// Flips every latent coordinate whose subject loading column has negative
/// cosine with the corresponding column of `group_h`.
SignAlignment sign_align(const MatrixXd& group_h, SubjectEffects& effects,
                         kalman::SmootherMoments& moments);

struct ElboTerms {
  double initial = 0.0;
  double transition = 0.0;
  double emission = 0.0;
  double entropy = 0.0;
  double kl_g = 0.0;
  double kl_h = 0.0;

  double total() const { return initial + transition + emission + entropy - kl_g - kl_h; }
};

/// Anchored ELBO of one subject: expected complete-data log density at the
/// smoothed moments and q factors, plus the path entropy, minus the KLs.
ElboTerms subject_elbo(const MessmParams& params, const MatrixXd& seq,
                       const SubjectEffects& effects, const kalman::SmootherMoments& moments);

struct MessmConfig {
  int max_iter = 500;
  double rel_tol = 1e-6;
  unsigned threads = 1;
  bool sign_align = true;
  bool update_sigma = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MessmFitReport {
  MessmParams params;
  std::vector<SubjectEffects> effects;
  std::vector<double> elbo_trace;
  int n_iter = 0;
  bool converged = false;
  double wall_time_seconds = 0.0;
  std::vector<std::uint64_t> smoother_passes;  // per iteration
  std::vector<std::string> warnings;
};

/// Anchored variational EM: one smoother pass per subject at the mean
/// anchor, closed-form q(g), q(h), optional sign alignment, M-step.
MessmFitReport fit_messm(const Dataset& data, const MessmParams& init, const MessmConfig& config);

/// Homogeneous model (every subject shares G, H): the Sigma -> 0 limit of
/// the updates, pooled over subjects. Exact EM for the shared LGSSM.
struct ReducedFit {
  MatrixXd G;
  MatrixXd H;
  VectorXd r;
  VectorXd m0;
  MatrixXd P0;
  std::vector<double> loglik_trace;
  int n_iter = 0;
};
ReducedFit fit_reduced(const Dataset& data, const MatrixXd& G, const MatrixXd& H,
                       const VectorXd& r, const VectorXd& m0, const MatrixXd& P0, int max_iter,
                       double rel_tol);

/// Starting values: principal-component loadings rotated to lower-trapezoidal
/// form, G = 0.5 I, then the reduced model; population means from the
/// reduced fit with Sigma_g = Sigma_h = sigma_scale * I.
MessmParams default_init_messm(const Dataset& data, Index q, double sigma_scale = 0.1);

/// Flips latent coordinates of a parameter set so the diagonal of the mean
/// loading is nonnegative (or so columns align with `reference` when given).
MessmParams align_signs(const MessmParams& params, const MatrixXd* reference = nullptr);

}  // namespace avem::messm
