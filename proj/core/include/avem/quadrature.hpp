#pragma once

#include "avem/linalg.hpp"

#include <vector>

namespace avem {

/// Gauss-Hermite rule for a standard normal weight: nodes x_j and weights
/// w_j with sum_j w_j g(x_j) ~= E[g(Z)], Z ~ N(0, 1). Weights sum to 1.
struct GaussHermiteRule {
  VectorXd nodes;
  VectorXd weights;
};

/// n-point probabilists' Gauss-Hermite rule (Golub-Welsch). Exact for
/// polynomials of degree <= 2n - 1.
GaussHermiteRule gauss_hermite(int n);

/// Tensor-product rule in d dimensions: J = n^d rows of standard-normal nodes.
struct TensorRule {
  MatrixXd nodes;  // J x d
  VectorXd weights;
};
TensorRule gauss_hermite_tensor(int n, int d);

/// Nodes of a tensor rule mapped to N(mean, cov) through the Cholesky
/// factor: f_j = mean + L z_j.
MatrixXd map_to_gaussian(const TensorRule& rule, const VectorXd& mean,
                         const MatrixXd& cov);

}  // namespace avem
