#include "avem/linalg.hpp"

#include "avem/error.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace avem {

double log_sum_exp(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

double log_sum_exp(const Eigen::Ref<const VectorXd>& x) {
  return log_sum_exp(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
}

Eigen::LLT<MatrixXd> checked_llt(const MatrixXd& a, const char* what) {
  if (a.rows() != a.cols())
    throw DimensionError(std::string(what) + ": matrix is not square");
  if (!a.allFinite()) throw NumericalError(std::string(what) + ": non-finite entries");
  Eigen::LLT<MatrixXd> llt(symmetrize(a));
  if (llt.info() != Eigen::Success)
    throw NumericalError(std::string(what) + ": matrix is not positive definite");
  return llt;
}

MatrixXd spd_inverse(const MatrixXd& a, const char* what) {
  auto llt = checked_llt(a, what);
  return symmetrize(llt.solve(MatrixXd::Identity(a.rows(), a.cols())));
}

double spd_log_det(const MatrixXd& a, const char* what) {
  auto llt = checked_llt(a, what);
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

bool is_spd(const MatrixXd& a, double sym_tol) {
  if (a.rows() != a.cols() || !a.allFinite()) return false;
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > sym_tol) return false;
  Eigen::LLT<MatrixXd> llt(a);
  return llt.info() == Eigen::Success;
}

MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

double gaussian_kl(const VectorXd& mean, const MatrixXd& cov,
                   const VectorXd& prior_mean, const MatrixXd& prior_cov) {
  const auto d = static_cast<double>(mean.size());
  auto prior_llt = checked_llt(prior_cov, "gaussian_kl prior covariance");
  const VectorXd diff = mean - prior_mean;
  const double trace_term = prior_llt.solve(cov).trace();
  const double quad = diff.dot(prior_llt.solve(diff));
  const double logdet_prior = 2.0 * prior_llt.matrixLLT().diagonal().array().log().sum();
  const double logdet_q = spd_log_det(cov, "gaussian_kl covariance");
  return 0.5 * (trace_term - d + quad + logdet_prior - logdet_q);
}

double gaussian_entropy(const MatrixXd& cov) {
  const auto d = static_cast<double>(cov.rows());
  return 0.5 * (d * (1.0 + kLog2Pi) + spd_log_det(cov, "gaussian_entropy"));
}

}  // namespace avem
