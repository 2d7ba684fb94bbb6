#include "avem/emission.hpp"

#include "avem/error.hpp"
#include "avem/quadrature.hpp"

#include <cmath>
#include <string>

namespace avem {

double gaussian_log_density(const VectorXd& residual, double sigma2) {
  const auto p = static_cast<double>(residual.size());
  return -0.5 * p * std::log(2.0 * M_PI * sigma2) - residual.squaredNorm() / (2.0 * sigma2);
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double bernoulli_log_density(double y, double eta) {
  // y*eta - softplus(eta) = -softplus(-eta) for y = 1 and -softplus(eta) for y = 0
  return y > 0.5 ? -softplus(-eta) : -softplus(eta);
}

namespace {

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_state(Index k, Index n_states) {
  if (k < 0 || k >= n_states) throw DimensionError("emission: state index out of range");
}

}  // namespace

double EmissionModel::expected_log_e(Index k, Index t, const VectorXd& mean, const MatrixXd& cov,
                                     const MatrixXd& seq, int n_quad) const {
  const auto rule = gauss_hermite_tensor(n_quad, static_cast<int>(mean.size()));
  const MatrixXd nodes = map_to_gaussian(rule, mean, cov);
  double acc = 0.0;
  for (Index j = 0; j < nodes.rows(); ++j)
    acc += rule.weights(j) * log_e(k, t, nodes.row(j).transpose(), seq);
  return acc;
}

MatrixXd EmissionModel::log_emission_matrix(const VectorXd& f, const MatrixXd& seq) const {
  if (f.size() != effect_dim())
    throw DimensionError("log_emission_matrix: effect has dimension " +
                         std::to_string(f.size()) + ", model expects " +
                         std::to_string(effect_dim()));
  if (seq.cols() != obs_dim())
    throw DimensionError("log_emission_matrix: observation dimension mismatch");
  const Index k_states = n_states();
  MatrixXd out(seq.rows(), k_states);
  for (Index t = 0; t < seq.rows(); ++t)
    for (Index k = 0; k < k_states; ++k) out(t, k) = log_e(k, t, f, seq);
  return out;
}

// ---------------------------------------------------------------------------
// LinearGaussianEmission

LinearGaussianEmission::LinearGaussianEmission(MatrixXd mu, VectorXd sigma2)
    : mu_(std::move(mu)), sigma2_(std::move(sigma2)) {
  if (mu_.rows() < 1 || mu_.cols() < 1) throw DimensionError("gaussian emission: empty mu");
  if (sigma2_.size() != mu_.rows())
    throw DimensionError("gaussian emission: sigma2 must have K entries");
  if ((sigma2_.array() <= 0.0).any() || !sigma2_.allFinite() || !mu_.allFinite())
    throw DimensionError("gaussian emission: variances must be positive and finite");
}

VectorXd LinearGaussianEmission::residual(Index k, Index t, const VectorXd& f,
                                          const MatrixXd& seq) const {
  check_state(k, n_states());
  if (seq.cols() != obs_dim()) throw DimensionError("gaussian emission: dimension mismatch");
  if (f.size() != effect_dim()) throw DimensionError("gaussian emission: effect dimension mismatch");
  return seq.row(t).transpose() - mu_.row(k).transpose() - shift(t, f);
}

double LinearGaussianEmission::log_e(Index k, Index t, const VectorXd& f,
                                     const MatrixXd& seq) const {
  return gaussian_log_density(residual(k, t, f, seq), sigma2_(k));
}

VectorXd LinearGaussianEmission::grad_f(Index k, Index t, const VectorXd& f,
                                        const MatrixXd& seq) const {
  return design(t).transpose() * residual(k, t, f, seq) / sigma2_(k);
}

MatrixXd LinearGaussianEmission::hess_f(Index k, Index t, const VectorXd&,
                                        const MatrixXd&) const {
  check_state(k, n_states());
  const MatrixXd z = design(t);
  return -(z.transpose() * z) / sigma2_(k);
}

double LinearGaussianEmission::expected_log_e(Index k, Index t, const VectorXd& mean,
                                              const MatrixXd& cov, const MatrixXd& seq,
                                              int) const {
  const MatrixXd z = design(t);
  const VectorXd r = residual(k, t, mean, seq);
  const auto p = static_cast<double>(obs_dim());
  return -0.5 * p * std::log(2.0 * M_PI * sigma2_(k)) -
         (r.squaredNorm() + (z * cov * z.transpose()).trace()) / (2.0 * sigma2_(k));
}

std::unique_ptr<EmissionModel> LinearGaussianEmission::fit_weighted(
    const std::vector<WeightedEffects>& subjects) const {
  const Index k_states = n_states();
  const Index p = obs_dim();
  MatrixXd num = MatrixXd::Zero(k_states, p);
  VectorXd den = VectorXd::Zero(k_states);
  for (const auto& s : subjects) {
    const MatrixXd& seq = *s.data;
    for (std::size_t a = 0; a < s.points.size(); ++a) {
      const MatrixXd& zeta = *s.zetas[a];
      for (Index t = 0; t < seq.rows(); ++t) {
        const VectorXd centered = seq.row(t).transpose() - shift(t, s.points[a]);
        for (Index k = 0; k < k_states; ++k) {
          const double w = s.weights[a] * zeta(t, k);
          num.row(k) += w * centered.transpose();
          den(k) += w;
        }
      }
    }
  }
  MatrixXd mu = mu_;
  for (Index k = 0; k < k_states; ++k)
    if (den(k) > 0.0) mu.row(k) = num.row(k) / den(k);

  VectorXd ss = VectorXd::Zero(k_states);
  for (const auto& s : subjects) {
    const MatrixXd& seq = *s.data;
    for (std::size_t a = 0; a < s.points.size(); ++a) {
      const MatrixXd& zeta = *s.zetas[a];
      for (Index t = 0; t < seq.rows(); ++t) {
        const VectorXd centered = seq.row(t).transpose() - shift(t, s.points[a]);
        for (Index k = 0; k < k_states; ++k)
          ss(k) += s.weights[a] * zeta(t, k) * (centered - mu.row(k).transpose()).squaredNorm();
      }
    }
  }
  VectorXd sigma2 = sigma2_;
  for (Index k = 0; k < k_states; ++k)
    if (den(k) > 0.0) sigma2(k) = std::max(ss(k) / (static_cast<double>(p) * den(k)), 1e-10);
  return with_parameters(std::move(mu), std::move(sigma2));
}

VectorXd LinearGaussianEmission::parameter_vector() const {
  VectorXd out(mu_.size() + sigma2_.size());
  Index pos = 0;
  for (Index k = 0; k < mu_.rows(); ++k)
    for (Index j = 0; j < mu_.cols(); ++j) out(pos++) = mu_(k, j);
  out.tail(sigma2_.size()) = sigma2_;
  return out;
}

// ---------------------------------------------------------------------------
// GaussianEmission

GaussianEmission::GaussianEmission(MatrixXd mu, VectorXd sigma2)
    : LinearGaussianEmission(std::move(mu), std::move(sigma2)) {}

MatrixXd GaussianEmission::design(Index) const {
  return MatrixXd::Identity(obs_dim(), obs_dim());
}

VectorXd GaussianEmission::shift(Index, const VectorXd& f) const { return f; }

std::unique_ptr<LinearGaussianEmission> GaussianEmission::with_parameters(MatrixXd mu,
                                                                          VectorXd sigma2) const {
  return std::make_unique<GaussianEmission>(std::move(mu), std::move(sigma2));
}

std::unique_ptr<EmissionModel> GaussianEmission::clone() const {
  return std::make_unique<GaussianEmission>(*this);
}

// ---------------------------------------------------------------------------
// BernoulliEmission

BernoulliEmission::BernoulliEmission(VectorXd beta) : beta_(std::move(beta)) {
  if (beta_.size() < 1 || !beta_.allFinite())
    throw DimensionError("bernoulli emission: beta must be finite and nonempty");
}

double BernoulliEmission::log_e(Index k, Index t, const VectorXd& f, const MatrixXd& seq) const {
  check_state(k, n_states());
  if (f.size() != 1 || seq.cols() != 1) throw DimensionError("bernoulli emission: d = p = 1");
  const double y = seq(t, 0);
  if (y != 0.0 && y != 1.0) throw DimensionError("bernoulli emission: observations must be 0/1");
  return bernoulli_log_density(y, beta_(k) + f(0));
}

VectorXd BernoulliEmission::grad_f(Index k, Index t, const VectorXd& f,
                                   const MatrixXd& seq) const {
  check_state(k, n_states());
  return VectorXd::Constant(1, seq(t, 0) - logistic(beta_(k) + f(0)));
}

MatrixXd BernoulliEmission::hess_f(Index k, Index, const VectorXd& f, const MatrixXd&) const {
  check_state(k, n_states());
  const double pr = logistic(beta_(k) + f(0));
  return MatrixXd::Constant(1, 1, -pr * (1.0 - pr));
}

std::unique_ptr<EmissionModel> BernoulliEmission::fit_weighted(
    const std::vector<WeightedEffects>& subjects) const {
  VectorXd beta = beta_;
  for (Index k = 0; k < n_states(); ++k) {
    auto objective = [&](double b, double* grad, double* hess) {
      double val = 0.0, g = 0.0, h = 0.0;
      for (const auto& s : subjects) {
        const MatrixXd& seq = *s.data;
        for (std::size_t a = 0; a < s.points.size(); ++a) {
          const MatrixXd& zeta = *s.zetas[a];
          const double fa = s.points[a](0);
          for (Index t = 0; t < seq.rows(); ++t) {
            const double w = s.weights[a] * zeta(t, k);
            if (w == 0.0) continue;
            const double eta = b + fa;
            const double pr = logistic(eta);
            val += w * bernoulli_log_density(seq(t, 0), eta);
            g += w * (seq(t, 0) - pr);
            h -= w * pr * (1.0 - pr);
          }
        }
      }
      if (grad) *grad = g;
      if (hess) *hess = h;
      return val;
    };
    double b = beta(k);
    double g = 0.0, h = 0.0;
    double val = objective(b, &g, &h);
    int iter = 0;
    for (; iter < 100; ++iter) {
      if (std::abs(g) < 1e-10 || h >= 0.0) break;
      double step = -g / h;
      double cand = b + step;
      double cand_val = objective(cand, nullptr, nullptr);
      int halvings = 0;
      while (cand_val < val - 1e-14 * std::abs(val) && halvings < 40) {
        step *= 0.5;
        cand = b + step;
        cand_val = objective(cand, nullptr, nullptr);
        ++halvings;
      }
      if (halvings == 40) break;
      b = cand;
      val = objective(b, &g, &h);
      if (std::abs(step) < 1e-14) break;
    }
    if (!std::isfinite(b)) throw NumericalError("bernoulli M-step: non-finite intercept");
    beta(k) = b;
  }
  return std::make_unique<BernoulliEmission>(std::move(beta));
}

std::unique_ptr<EmissionModel> BernoulliEmission::clone() const {
  return std::make_unique<BernoulliEmission>(*this);
}

}  // namespace avem
