#pragma once

#include "avem/dataset.hpp"
#include "avem/exact_em.hpp"
#include "avem/messm.hpp"
#include "avem/mhmm.hpp"
#include "avem/partial_anchor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace avem::sim {

enum class Variant { gaussian_mhmm, bernoulli_mhmm, messm, localized };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ScenarioSpec {
  Variant variant = Variant::gaussian_mhmm;
  Index n = 40;
  Index T = 40;
  Index K = 2;
  Index d = 1;            // gaussian_mhmm: effect and observation dimension
  double tau2 = 1.0;      // gaussian_mhmm, bernoulli_mhmm
  double gamma_diag = 0.92;
  // localized
  double tau_a2 = 1.0;
  double tau_b2 = 1.5;
  Index t0 = 10;
  double separation = 1.5;  // state means (+separation, -separation)
  // messm
  double messm_sigma = 0.05;  // Sigma_g = Sigma_h = messm_sigma * I
  double messm_r = 0.25;
  bool messm_stationary = true;  // redraw G_i until its spectral radius is < 1
  std::uint64_t seed = 0;

  void validate() const;
};

/// Ground truth of a generated dataset. For the mixed HMM variants
/// `effects[i]` is f_i ((f_a, f_b) for localized); for messm `G_i`, `H_i` are
/// the subject matrices and `latent[i]` the T x q state path.
struct Truth {
  hmm::ChainParams chain;
  std::shared_ptr<const EmissionModel> emission;
  MatrixXd sigma;
  std::vector<VectorXd> effects;
  std::vector<std::vector<Index>> states;

  MatrixXd G, H;
  VectorXd r;
  std::vector<MatrixXd> G_i, H_i, latent;
};

struct Simulated {
  Dataset data;
  Truth truth;
};

/// Left eigenvector pi Gamma = pi by a linear solve; throws NumericalError
/// for reducible chains.
VectorXd stationary_distribution(const MatrixXd& gamma);

/// State mean levels a_k: K=2 (1.5, -1.5), K=3 (1.5, 0, -1.5),
/// K=4 (1.5, 0.5, -0.5, -1.5); other K evenly spaced on [-1.5, 1.5].
VectorXd mean_ladder(Index K);

/// Sticky transition matrix: diagonal `diag`, the rest spread evenly.
MatrixXd sticky_gamma(Index K, double diag);

/// Per-subject streams are seeded by derive_seed(spec.seed, replicate, i).
Simulated gen_gaussian_mhmm(const ScenarioSpec& spec, std::uint64_t replicate = 0);
Simulated gen_bernoulli_mhmm(const ScenarioSpec& spec, std::uint64_t replicate = 0);
Simulated gen_messm(const ScenarioSpec& spec, std::uint64_t replicate = 0);
Simulated gen_localized(const ScenarioSpec& spec, std::uint64_t replicate = 0);
Simulated generate(const ScenarioSpec& spec, std::uint64_t replicate = 0);

/// Population parameters of the state-space scenario.
MatrixXd messm_true_G();
MatrixXd messm_true_H();

struct ReplicateResult {
  std::string method;
  std::uint64_t replicate = 0;
  std::optional<double> rmse_mu, rmse_sigma2, gamma_abs_err, mse_f, rmse_beta, mse_fb, rmse_G,
      rmse_H, rmse_R;
  int n_iter = 0;
  bool converged = false;
  double wall_time = 0.0;
};

/// Mixed HMM metrics after sorting states by the first mean coordinate (or
/// beta) descending. mse_f = (1/n) sum_i |nu_i - f_i|^2 over the first
/// effect_dim coordinates of the truth; for d=2 localized fits mse_fb uses
/// the second coordinate.
ReplicateResult score_mhmm(const mhmm::FitReport& fit, const Truth& truth);
ReplicateResult score_pavem(const pavem::PavemReport& fit, const Truth& truth);
/// State-space metrics after aligning latent signs to the true loading.
ReplicateResult score_messm(const messm::MessmFitReport& fit, const Truth& truth);

enum class MethodKind { avem, pavem, qem, mcem };

struct MethodSpec {
  MethodKind kind = MethodKind::avem;
  int nodes = 0;  // J per dimension (qem, pavem) or samples (mcem)
  mhmm::EStepMethod e_step = mhmm::EStepMethod::automatic;
  int n_quad = 9;

  std::string label() const;
};

MethodSpec parse_method(const std::string& s);

struct MonteCarloConfig {
  ScenarioSpec scenario;
  std::vector<MethodSpec> methods;
  int n_reps = 20;
  std::uint64_t first_replicate = 0;
  int max_iter = 500;
  double rel_tol = 1e-6;
  bool sign_align = true;
  unsigned threads = 1;  // replicates run concurrently, fits single-threaded
};

/// Fits one generated replicate with one method and scores it.
ReplicateResult run_method(const Simulated& sim, const ScenarioSpec& spec,
                           const MethodSpec& method, std::uint64_t replicate,
                           const MonteCarloConfig& config);

/// Rows ordered by (replicate, method). Deterministic given the config.
std::vector<ReplicateResult> run_monte_carlo(const MonteCarloConfig& config);

/// Median of the present values of one metric among rows with `method`.
double median_metric(const std::vector<ReplicateResult>& rows, const std::string& method,
                     std::optional<double> ReplicateResult::*metric);

}  // namespace avem::sim
