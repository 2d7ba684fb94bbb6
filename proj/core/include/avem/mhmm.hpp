#pragma once

#include "avem/dataset.hpp"
#include "avem/emission.hpp"
#include "avem/hmm.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace avem::mhmm {

/// Global parameters theta = (pi, Gamma, theta_e, Sigma) of a mixed HMM with
/// f_i ~ N(0, Sigma).
struct MhmmParams {
  hmm::ChainParams chain;
  std::shared_ptr<const EmissionModel> emission;
  MatrixXd sigma;

  Index effect_dim() const { return sigma.rows(); }
  void validate() const;
};

/// Gaussian variational factor q_i(f_i) = N(nu, omega).
struct QFactor {
  VectorXd nu;
  MatrixXd omega;
};

enum class EStepMethod {
  automatic,    // closed_form when the emission allows it, else laplace
  closed_form,
  laplace,
  quadrature,
};

std::string to_string(EStepMethod m);
EStepMethod parse_e_step_method(const std::string& s);

struct AvemConfig {
  int max_iter = 500;
  double rel_tol = 1e-6;
  EStepMethod e_step = EStepMethod::automatic;
  int n_quad = 9;          // quadrature nodes per dimension
  std::uint64_t seed = 0;  // AVEM itself draws no random numbers
  unsigned threads = 1;    // 0 = hardware concurrency
  bool update_sigma = true;

  void validate() const;
};

struct FitReport {
  MhmmParams params;
  std::vector<QFactor> q_factors;
  std::vector<VectorXd> anchors;  // anchors used by the final E-step
  std::vector<double> elbo_trace; // one entry per iteration
  int n_iter = 0;
  bool converged = false;
  double wall_time_seconds = 0.0;
  /// Forward passes issued by the fit in each iteration.
  std::vector<std::uint64_t> forward_passes;
  std::vector<std::string> warnings;
};

// --- E-step ---------------------------------------------------------------

/// Conditional state posterior p(U | D, f0; theta): one forward-backward pass
/// with emissions evaluated at the anchor.
hmm::StatePosterior e_step_local(const MhmmParams& params, const MatrixXd& seq,
                                 const VectorXd& f0);

/// Exact Gaussian factor for linear-Gaussian emissions:
///   Omega^{-1} = Sigma^{-1} + sum_t sum_k zeta_kt Z_t^T Z_t / sigma_k^2
///   nu = Omega sum_t sum_k zeta_kt Z_t^T (D_t - mu_k) / sigma_k^2
QFactor update_q_closed_form(const MhmmParams& params, const MatrixXd& seq,
                             const hmm::StatePosterior& post);

/// Laplace approximation of exp(l(f)), l(f) = -f'Sigma^{-1}f/2 +
/// sum zeta log e(f): damped Newton from f0 (max 50 steps, gradient
/// tolerance 1e-8), covariance = inverse negative Hessian at the mode.
QFactor update_q_laplace(const MhmmParams& params, const MatrixXd& seq,
                         const hmm::StatePosterior& post, const VectorXd& f0);

/// Direct maximization over (nu, Omega) of the subject's variational
/// objective with expectations by Gauss-Hermite nodes mapped through the
/// current iterate.
QFactor update_q_quadrature(const MhmmParams& params, const MatrixXd& seq,
                            const hmm::StatePosterior& post, const QFactor& prev, int n_quad);

/// The subject's q-dependent objective L_i(nu, Omega) evaluated with an
/// n_quad^d rule mapped through (nu, Omega). Exposed for comparisons.
double q_objective(const MhmmParams& params, const MatrixXd& seq,
                   const hmm::StatePosterior& post, const QFactor& q, int n_quad);

// --- M-step ---------------------------------------------------------------

VectorXd m_step_pi(std::span<const hmm::StatePosterior> posts);

struct GammaUpdate {
  MatrixXd gamma;
  std::vector<Index> degenerate_rows;  // rows with no expected visits, set uniform
};
GammaUpdate m_step_gamma(std::span<const hmm::StatePosterior> posts);

MatrixXd m_step_sigma(std::span<const QFactor> q);

/// Closed form for linear-Gaussian emissions; otherwise numeric
/// maximization with expectations over an n_quad^d rule mapped through q_i.
std::shared_ptr<const EmissionModel> m_step_theta_e(const EmissionModel& emission,
                                                    const Dataset& data,
                                                    std::span<const hmm::StatePosterior> posts,
                                                    std::span<const QFactor> q, int n_quad);

// --- ELBO -----------------------------------------------------------------

struct ElboTerms {
  double emission = 0.0;    // sum zeta E_q[log e]
  double initial = 0.0;     // sum zeta_1 log pi
  double transition = 0.0;  // sum xi log Gamma
  double kl = 0.0;          // KL(q || N(0, Sigma))
  double entropy = 0.0;     // entropy of the anchored path posterior

  double total() const { return emission + initial + transition - kl + entropy; }
};

ElboTerms subject_elbo_terms(const MhmmParams& params, const MatrixXd& seq, const QFactor& q,
                             const hmm::StatePosterior& post, int n_quad);

/// Anchored ELBO with the path posteriors supplied (as produced by the
/// E-step that preceded the current parameters).
double anchored_elbo_given_posteriors(const MhmmParams& params, const Dataset& data,
                                      std::span<const QFactor> q,
                                      std::span<const hmm::StatePosterior> posts, int n_quad);

/// Anchored ELBO L_A(f0, q, theta): path posteriors recomputed at the anchors
/// under `params`.
double anchored_elbo(const MhmmParams& params, const Dataset& data, std::span<const QFactor> q,
                     std::span<const VectorXd> anchors, int n_quad);

// --- driver ---------------------------------------------------------------

/// Anchored variational EM. Iterates: anchor at the previous variational
/// mean, one forward-backward pass per subject, q update, M-step, ELBO.
/// Stops on relative ELBO change < rel_tol or max_iter.
FitReport fit_mhmm(const Dataset& data, const MhmmParams& init, const AvemConfig& config);

/// Default start for Gaussian emissions: uniform pi, sticky Gamma (diagonal
/// 0.8), farthest-point k-means means sorted by first coordinate
/// (descending), pooled variance, Sigma = I.
MhmmParams default_init_gaussian(const Dataset& data, Index n_states);

/// Default start for Bernoulli emissions: logit of the pooled rate plus a
/// descending ladder in [-1, 1], tau^2 = 1.
MhmmParams default_init_bernoulli(const Dataset& data, Index n_states);

/// Initial law uniform, Gamma with `diag` on the diagonal.
hmm::ChainParams sticky_chain(Index n_states, double diag);

/// Sorts states by the first emission coordinate (mu_k(0) or beta_k),
/// descending, and permutes pi, Gamma, the emission accordingly.
MhmmParams align_states(const MhmmParams& params);

namespace detail {

/// Per-subject statistics of a mixture over additive emission-mean offsets:
/// first(k) is T x p with rows sum_j w_j zeta_j(t,k) off_j(t), second is
/// T x K with sum_j w_j zeta_j(t,k) |off_j(t)|^2. Used by partial anchoring;
/// absent offsets mean a single component at zero offset.
struct OffsetMoments {
  std::vector<MatrixXd> first;
  MatrixXd second;
};

QFactor closed_form_q(const LinearGaussianEmission& model, const MatrixXd& sigma,
                      const MatrixXd& seq, const MatrixXd& zeta, const OffsetMoments* off);

std::unique_ptr<LinearGaussianEmission> gaussian_m_step(
    const LinearGaussianEmission& model, const Dataset& data, std::span<const MatrixXd> zetas,
    std::span<const QFactor> q, std::span<const OffsetMoments> off);

/// sum_t sum_k zeta E_q[log e] in closed form, with optional offsets.
double gaussian_expected_loglik(const LinearGaussianEmission& model, const MatrixXd& seq,
                                const MatrixXd& zeta, const QFactor& q,
                                const OffsetMoments* off);

double initial_term(const VectorXd& pi, const MatrixXd& zeta);
double transition_term(const MatrixXd& gamma, const std::vector<MatrixXd>& xi);

}  // namespace detail

}  // namespace avem::mhmm
