#pragma once

#include <Eigen/Dense>
#include <span>

namespace avem {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// log(sum(exp(x))) with max subtraction; -inf for an all -inf input.
double log_sum_exp(std::span<const double> x);
double log_sum_exp(const Eigen::Ref<const VectorXd>& x);

/// (A + A^T) / 2
inline MatrixXd symmetrize(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

/// Cholesky factor of a symmetric positive definite matrix. Throws
/// NumericalError naming `what` if the matrix is not PD.
Eigen::LLT<MatrixXd> checked_llt(const MatrixXd& a, const char* what);

/// Inverse of an SPD matrix through its Cholesky factor, symmetrized.
MatrixXd spd_inverse(const MatrixXd& a, const char* what);

/// log det of an SPD matrix through its Cholesky factor.
double spd_log_det(const MatrixXd& a, const char* what);

/// True when `a` is symmetric (max-abs tolerance) and Cholesky succeeds.
bool is_spd(const MatrixXd& a, double sym_tol = 1e-10);

MatrixXd kron(const MatrixXd& a, const MatrixXd& b);

/// KL( N(mean, cov) || N(prior_mean, prior_cov) ).
double gaussian_kl(const VectorXd& mean, const MatrixXd& cov,
                   const VectorXd& prior_mean, const MatrixXd& prior_cov);

/// Differential entropy of N(., cov) in nats.
double gaussian_entropy(const MatrixXd& cov);

}  // namespace avem
