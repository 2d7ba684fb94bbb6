#include "avem/kalman.hpp"

#include "avem/error.hpp"

#include <atomic>
#include <cmath>

namespace avem::kalman {
namespace {

std::atomic<std::uint64_t> g_smoother_passes{0};

}  // namespace

void LgssmSpec::validate() const {
  const Index q = G.rows();
  if (q < 1 || G.cols() != q) throw DimensionError("LgssmSpec: G must be square and nonempty");
  if (H.cols() != q || H.rows() < 1) throw DimensionError("LgssmSpec: H must be p x q");
  if (r.size() != H.rows()) throw DimensionError("LgssmSpec: r must have p entries");
  if ((r.array() <= 0.0).any() || !r.allFinite())
    throw DimensionError("LgssmSpec: observation variances must be positive");
  if (m0.size() != q || P0.rows() != q || P0.cols() != q)
    throw DimensionError("LgssmSpec: m0/P0 dimension mismatch");
  if (!is_spd(P0, 1e-9)) throw DimensionError("LgssmSpec: P0 must be symmetric positive definite");
}

FilterResult kalman_filter(const LgssmSpec& spec, const MatrixXd& data) {
  spec.validate();
  const Index t_len = data.rows();
  const Index q = spec.state_dim();
  const Index p = spec.obs_dim();
  if (t_len < 1) throw DimensionError("kalman_filter: need at least one observation");
  if (data.cols() != p) throw DimensionError("kalman_filter: data must be T x p");

  FilterResult out;
  out.m_pred.resize(t_len);
  out.P_pred.resize(t_len);
  out.m_filt.resize(t_len);
  out.P_filt.resize(t_len);
  out.gain.resize(t_len);
  const MatrixXd eye_q = MatrixXd::Identity(q, q);
  const MatrixXd r_mat = spec.r.asDiagonal();

  double loglik = 0.0;
  for (Index t = 0; t < t_len; ++t) {
    if (t == 0) {
      out.m_pred[0] = spec.m0;
      out.P_pred[0] = spec.P0;
    } else {
      out.m_pred[t] = spec.G * out.m_filt[t - 1];
      out.P_pred[t] = symmetrize(spec.G * out.P_filt[t - 1] * spec.G.transpose() + eye_q);
    }
    const MatrixXd& pp = out.P_pred[t];
    const MatrixXd s = symmetrize(spec.H * pp * spec.H.transpose() + r_mat);
    Eigen::LLT<MatrixXd> s_llt(s);
    if (s_llt.info() != Eigen::Success)
      throw NumericalError("kalman_filter: innovation covariance is singular at t=" +
                           std::to_string(t));
    const VectorXd innov = data.row(t).transpose() - spec.H * out.m_pred[t];
    // K = P H^T S^{-1}, computed as (S^{-1} H P)^T
    const MatrixXd k_gain = s_llt.solve(spec.H * pp).transpose();
    out.gain[t] = k_gain;
    out.m_filt[t] = out.m_pred[t] + k_gain * innov;
    out.P_filt[t] = symmetrize((eye_q - k_gain * spec.H) * pp);

    const double logdet = 2.0 * s_llt.matrixLLT().diagonal().array().log().sum();
    loglik += -0.5 * (static_cast<double>(p) * kLog2Pi + logdet + innov.dot(s_llt.solve(innov)));
  }
  out.log_likelihood = loglik;
  return out;
}

SmootherMoments rts_smoother(const LgssmSpec& spec, const FilterResult& f) {
  const auto t_len = static_cast<Index>(f.m_filt.size());
  if (t_len < 1 || static_cast<Index>(f.P_pred.size()) != t_len)
    throw DimensionError("rts_smoother: malformed filter output");
  SmootherMoments sm;
  sm.m_hat.resize(t_len);
  sm.P_hat.resize(t_len);
  sm.P_lag.resize(t_len - 1);
  sm.m_hat[t_len - 1] = f.m_filt[t_len - 1];
  sm.P_hat[t_len - 1] = f.P_filt[t_len - 1];
  for (Index t = t_len - 1; t >= 1; --t) {
    Eigen::LLT<MatrixXd> pred_llt(f.P_pred[t]);
    if (pred_llt.info() != Eigen::Success)
      throw NumericalError("rts_smoother: predicted covariance is singular at t=" +
                           std::to_string(t));
    // J_{t-1} = P_{t-1}^{t-1} G^T (P_t^{t-1})^{-1}
    const MatrixXd j_gain = pred_llt.solve(spec.G * f.P_filt[t - 1]).transpose();
    sm.m_hat[t - 1] = f.m_filt[t - 1] + j_gain * (sm.m_hat[t] - f.m_pred[t]);
    sm.P_hat[t - 1] =
        symmetrize(f.P_filt[t - 1] + j_gain * (sm.P_hat[t] - f.P_pred[t]) * j_gain.transpose());
    sm.P_lag[t - 1] = sm.P_hat[t] * j_gain.transpose();
  }
  sm.Q_hat.resize(t_len);
  sm.Q_lag.resize(t_len - 1);
  for (Index t = 0; t < t_len; ++t)
    sm.Q_hat[t] = sm.P_hat[t] + sm.m_hat[t] * sm.m_hat[t].transpose();
  for (Index t = 0; t + 1 < t_len; ++t)
    sm.Q_lag[t] = sm.P_lag[t] + sm.m_hat[t + 1] * sm.m_hat[t].transpose();
  return sm;
}

SmootherMoments smooth(const LgssmSpec& spec, const MatrixXd& data, double* log_likelihood) {
  g_smoother_passes.fetch_add(1, std::memory_order_relaxed);
  const FilterResult f = kalman_filter(spec, data);
  if (log_likelihood) *log_likelihood = f.log_likelihood;
  return rts_smoother(spec, f);
}

JointPosterior dense_joint_oracle(const LgssmSpec& spec, const MatrixXd& data) {
  spec.validate();
  const Index t_len = data.rows();
  const Index q = spec.state_dim();
  const Index p = spec.obs_dim();
  if (t_len * q > 200) throw DimensionError("dense_joint_oracle: T*q exceeds 200");
  if (t_len < 1 || data.cols() != p) throw DimensionError("dense_joint_oracle: data must be T x p");

  // Prior moments of the stacked state from U_t = G U_{t-1} + w_t.
  const Index n = t_len * q;
  VectorXd mean(n);
  MatrixXd cov(n, n);
  std::vector<MatrixXd> g_pow(static_cast<std::size_t>(t_len));
  g_pow[0] = MatrixXd::Identity(q, q);
  for (Index k = 1; k < t_len; ++k) g_pow[k] = spec.G * g_pow[k - 1];
  std::vector<MatrixXd> marg(static_cast<std::size_t>(t_len));
  marg[0] = spec.P0;
  for (Index t = 1; t < t_len; ++t)
    marg[t] = spec.G * marg[t - 1] * spec.G.transpose() + MatrixXd::Identity(q, q);
  for (Index t = 0; t < t_len; ++t) {
    mean.segment(t * q, q) = g_pow[t] * spec.m0;
    for (Index s = 0; s <= t; ++s) {
      // Cov(U_t, U_s) = G^{t-s} Var(U_s) for t >= s
      const MatrixXd block = g_pow[t - s] * marg[s];
      cov.block(t * q, s * q, q, q) = block;
      cov.block(s * q, t * q, q, q) = block.transpose();
    }
  }

  const Index m = t_len * p;
  MatrixXd h_big = MatrixXd::Zero(m, n);
  VectorXd y(m);
  VectorXd r_big(m);
  for (Index t = 0; t < t_len; ++t) {
    h_big.block(t * p, t * q, p, q) = spec.H;
    y.segment(t * p, p) = data.row(t).transpose();
    r_big.segment(t * p, p) = spec.r;
  }
  const MatrixXd s = symmetrize(h_big * cov * h_big.transpose() + MatrixXd(r_big.asDiagonal()));
  auto s_llt = checked_llt(s, "dense_joint_oracle marginal covariance");
  const MatrixXd cross = cov * h_big.transpose();
  const VectorXd innov = y - h_big * mean;

  JointPosterior post;
  post.mean = mean + cross * s_llt.solve(innov);
  post.covariance = symmetrize(cov - cross * s_llt.solve(cross.transpose()));
  const double logdet = 2.0 * s_llt.matrixLLT().diagonal().array().log().sum();
  post.log_likelihood =
      -0.5 * (static_cast<double>(m) * kLog2Pi + logdet + innov.dot(s_llt.solve(innov)));
  return post;
}

double smoother_entropy(const SmootherMoments& sm) {
  const Index t_len = sm.length();
  if (t_len < 1) return 0.0;
  double h = gaussian_entropy(sm.P_hat[0]);
  for (Index t = 1; t < t_len; ++t) {
    // Var(U_t | U_{t-1}, D) = P_t - C P_{t-1}^{-1} C^T, C = Cov(U_t, U_{t-1})
    const MatrixXd& c = sm.P_lag[t - 1];
    auto prev = checked_llt(sm.P_hat[t - 1], "smoother_entropy");
    const MatrixXd cond = symmetrize(sm.P_hat[t] - c * prev.solve(c.transpose()));
    h += gaussian_entropy(cond);
  }
  return h;
}

std::uint64_t smoother_pass_count() { return g_smoother_passes.load(std::memory_order_relaxed); }

}  // namespace avem::kalman
