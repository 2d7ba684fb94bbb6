#pragma once

#include "avem/linalg.hpp"

#include <memory>
#include <string>
#include <vector>

namespace avem {

/// A discrete measure over one subject's random effect, each support point
/// paired with the state posterior zeta (T x K) that applies at that point.
/// Pointers are non-owning and must outlive the M-step call.
struct WeightedEffects {
  const MatrixXd* data = nullptr;
  std::vector<VectorXd> points;
  std::vector<double> weights;
  std::vector<const MatrixXd*> zetas;
};

/// Emission density e_k(t; f) = p(D_t | U_t = k, f, D_{1:t-1}).
///
/// `seq` is the full T x p observation matrix of one subject; row t is the
/// current observation and rows [0, t) are the observed history. Concrete
/// models here ignore the history but the contract carries it. Models are
/// immutable; M-steps return a new model.
class EmissionModel {
 public:
  virtual ~EmissionModel() = default;

  virtual std::string name() const = 0;
  virtual Index n_states() const = 0;
  virtual Index effect_dim() const = 0;
  virtual Index obs_dim() const = 0;

  virtual double log_e(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const = 0;
  virtual VectorXd grad_f(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const = 0;
  virtual MatrixXd hess_f(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const = 0;

  virtual bool has_closed_form_gaussian() const { return false; }

  /// E_{N(mean, cov)}[log e_k(t; f)]. The default uses an n_quad^d
  /// Gauss-Hermite rule centered and scaled by (mean, cov).
  virtual double expected_log_e(Index k, Index t, const VectorXd& mean, const MatrixXd& cov,
                                const MatrixXd& seq, int n_quad) const;

  /// Maximizes sum_i sum_j w_ij sum_t sum_k zeta_ij(t,k) log e_k(t; f_ij)
  /// over the emission parameters.
  virtual std::unique_ptr<EmissionModel> fit_weighted(
      const std::vector<WeightedEffects>& subjects) const = 0;

  /// Flat parameter vector (for reporting and serialization).
  virtual VectorXd parameter_vector() const = 0;

  virtual std::unique_ptr<EmissionModel> clone() const = 0;

  /// T x K matrix of log e_k(t; f) for a whole sequence.
  MatrixXd log_emission_matrix(const VectorXd& f, const MatrixXd& seq) const;
};

/// Gaussian log density of a residual vector with isotropic variance.
double gaussian_log_density(const VectorXd& residual, double sigma2);

/// Emissions D_t | U_t = k, f ~ N(mu_k + Z_t f, sigma2_k I_p) with a known
/// design Z_t (p x d). Admits closed-form variational and M-step updates.
class LinearGaussianEmission : public EmissionModel {
 public:
  LinearGaussianEmission(MatrixXd mu, VectorXd sigma2);

  Index n_states() const override { return mu_.rows(); }
  Index obs_dim() const override { return mu_.cols(); }
  bool has_closed_form_gaussian() const override { return true; }

  const MatrixXd& mu() const { return mu_; }
  const VectorXd& sigma2() const { return sigma2_; }

  /// Z_t (p x d).
  virtual MatrixXd design(Index t) const = 0;
  /// Z_t f.
  virtual VectorXd shift(Index t, const VectorXd& f) const = 0;
  /// Same model class with new (mu, sigma2).
  virtual std::unique_ptr<LinearGaussianEmission> with_parameters(MatrixXd mu,
                                                                  VectorXd sigma2) const = 0;

  /// D_t - mu_k - Z_t f.
  VectorXd residual(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const;

  double log_e(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const override;
  VectorXd grad_f(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const override;
  MatrixXd hess_f(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const override;
  double expected_log_e(Index k, Index t, const VectorXd& mean, const MatrixXd& cov,
                        const MatrixXd& seq, int n_quad) const override;
  std::unique_ptr<EmissionModel> fit_weighted(
      const std::vector<WeightedEffects>& subjects) const override;
  VectorXd parameter_vector() const override;

 protected:
  MatrixXd mu_;     // K x p state means
  VectorXd sigma2_; // K state variances
};

/// D_t | U_t = k, f ~ N(mu_k + f, sigma2_k I_p) with d = p.
class GaussianEmission final : public LinearGaussianEmission {
 public:
  GaussianEmission(MatrixXd mu, VectorXd sigma2);

  std::string name() const override { return "gaussian"; }
  Index effect_dim() const override { return mu_.cols(); }
  MatrixXd design(Index t) const override;
  VectorXd shift(Index t, const VectorXd& f) const override;
  std::unique_ptr<LinearGaussianEmission> with_parameters(MatrixXd mu,
                                                          VectorXd sigma2) const override;
  std::unique_ptr<EmissionModel> clone() const override;
};

/// Binary emissions with logit P(Y_t = 1 | U_t = k, f) = beta_k + f, d = p = 1.
class BernoulliEmission final : public EmissionModel {
 public:
  explicit BernoulliEmission(VectorXd beta);

  std::string name() const override { return "bernoulli"; }
  Index n_states() const override { return beta_.size(); }
  Index effect_dim() const override { return 1; }
  Index obs_dim() const override { return 1; }
  const VectorXd& beta() const { return beta_; }

  double log_e(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const override;
  VectorXd grad_f(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const override;
  MatrixXd hess_f(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const override;
  /// Newton ascent per state; the objective is concave in each beta_k.
  std::unique_ptr<EmissionModel> fit_weighted(
      const std::vector<WeightedEffects>& subjects) const override;
  VectorXd parameter_vector() const override { return beta_; }
  std::unique_ptr<EmissionModel> clone() const override;

 private:
  VectorXd beta_;
};

/// log(1 + exp(x)) without overflow.
double softplus(double x);
/// y * eta - log(1 + exp(eta)) for y in {0, 1}.
double bernoulli_log_density(double y, double eta);

}  // namespace avem
