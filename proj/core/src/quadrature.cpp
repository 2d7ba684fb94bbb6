#include "avem/quadrature.hpp"

#include "avem/error.hpp"

#include <cmath>
#include <limits>

namespace avem {

GaussHermiteRule gauss_hermite(int n) {
  if (n < 1) throw DimensionError("gauss_hermite: need at least one node");
  GaussHermiteRule rule;
  if (n == 1) {
    rule.nodes = VectorXd::Zero(1);
    rule.weights = VectorXd::Ones(1);
    return rule;
  }
  // Jacobi matrix of the monic probabilists' Hermite recurrence.
  MatrixXd jacobi = MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = std::sqrt(static_cast<double>(k));
    jacobi(k - 1, k) = jacobi(k, k - 1);
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(jacobi);
  const VectorXd x = eig.eigenvalues();
  VectorXd w = eig.eigenvectors().row(0).transpose().array().square();

  // Enforce exact symmetry so odd moments vanish and the middle node is 0.
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int j = 0; j < n; ++j) {
    const int m = n - 1 - j;
    rule.nodes(j) = 0.5 * (x(j) - x(m));
    rule.weights(j) = 0.5 * (w(j) + w(m));
  }
  if (n % 2 == 1) rule.nodes(n / 2) = 0.0;
  rule.weights /= rule.weights.sum();
  return rule;
}

TensorRule gauss_hermite_tensor(int n, int d) {
  if (d < 1) throw DimensionError("gauss_hermite_tensor: dimension must be >= 1");
  const double total = std::pow(static_cast<double>(n), d);
  if (total > 1e7) throw DimensionError("gauss_hermite_tensor: n^d exceeds 1e7 nodes");
  const auto base = gauss_hermite(n);
  const auto count = static_cast<Index>(total);
  TensorRule rule;
  rule.nodes.resize(count, d);
  rule.weights.resize(count);
  for (Index j = 0; j < count; ++j) {
    Index rem = j;
    double w = 1.0;
    // first coordinate varies slowest
    for (int c = d - 1; c >= 0; --c) {
      const Index idx = rem % n;
      rem /= n;
      rule.nodes(j, c) = base.nodes(idx);
      w *= base.weights(idx);
    }
    rule.weights(j) = w;
  }
  return rule;
}

MatrixXd map_to_gaussian(const TensorRule& rule, const VectorXd& mean, const MatrixXd& cov) {
  if (cov.rows() != mean.size() || rule.nodes.cols() != mean.size())
    throw DimensionError("map_to_gaussian: dimension mismatch");
  const MatrixXd chol = checked_llt(cov, "map_to_gaussian covariance").matrixL();
  MatrixXd out = (rule.nodes * chol.transpose()).rowwise() + mean.transpose();
  return out;
}

}  // namespace avem
