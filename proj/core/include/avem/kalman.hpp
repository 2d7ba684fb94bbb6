#pragma once

#include "avem/linalg.hpp"

#include <cstdint>
#include <vector>

namespace avem::kalman {

/// Linear Gaussian state-space model with identity state noise:
///   U_1 ~ N(m0, P0),  U_t | U_{t-1} ~ N(G U_{t-1}, I),  D_t | U_t ~ N(H U_t, diag(r)).
struct LgssmSpec {
  MatrixXd G;   // q x q
  MatrixXd H;   // p x q
  VectorXd r;   // p diagonal observation variances
  VectorXd m0;  // q
  MatrixXd P0;  // q x q

  Index state_dim() const { return G.rows(); }
  Index obs_dim() const { return H.rows(); }
  void validate() const;
};

struct FilterResult {
  std::vector<VectorXd> m_pred, m_filt;  // m_t^{t-1}, m_t^t
  std::vector<MatrixXd> P_pred, P_filt;  // P_t^{t-1}, P_t^t
  std::vector<MatrixXd> gain;            // K_t
  double log_likelihood = 0.0;           // log p(D_{1:T})
};

/// Smoothed moments. Index t of the lag vectors refers to the pair (t+1, t)
/// in zero-based time, i.e. P_lag[t] = Cov(U_{t+1}, U_t | D).
struct SmootherMoments {
  std::vector<VectorXd> m_hat;
  std::vector<MatrixXd> P_hat;
  std::vector<MatrixXd> P_lag;
  std::vector<MatrixXd> Q_hat;  // P_hat + m m^T
  std::vector<MatrixXd> Q_lag;  // P_lag + m_{t+1} m_t^T

  Index length() const { return static_cast<Index>(m_hat.size()); }
};

/// Forward filter over the rows of `data` (T x p). The innovation covariance
/// is factorized with LLT; a non-PD innovation throws NumericalError.
FilterResult kalman_filter(const LgssmSpec& spec, const MatrixXd& data);

/// Rauch-Tung-Striebel smoother with lag-one cross covariances.
SmootherMoments rts_smoother(const LgssmSpec& spec, const FilterResult& filtered);

/// Filter + smoother; increments the smoother pass counter.
SmootherMoments smooth(const LgssmSpec& spec, const MatrixXd& data,
                       double* log_likelihood = nullptr);

/// Exact posterior of the stacked state (U_1, ..., U_T) by dense Gaussian
/// conditioning. Only for desk-scale problems (T q <= 200).
struct JointPosterior {
  VectorXd mean;        // Tq
  MatrixXd covariance;  // Tq x Tq
  double log_likelihood = 0.0;

  VectorXd mean_at(Index t, Index q) const { return mean.segment(t * q, q); }
  MatrixXd cov_block(Index t, Index s, Index q) const {
    return covariance.block(t * q, s * q, q, q);
  }
};
JointPosterior dense_joint_oracle(const LgssmSpec& spec, const MatrixXd& data);

/// Entropy of the smoothed Gauss-Markov path posterior, from the marginal and
/// lag-one moments: H(U_1) + sum_t H(U_{t+1} | U_t).
double smoother_entropy(const SmootherMoments& moments);

std::uint64_t smoother_pass_count();

}  // namespace avem::kalman
