#include "avem/messm.hpp"

#include "avem/error.hpp"
#include "avem/parallel.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace avem::messm {

namespace {

VectorXd vkron(const VectorXd& a, const VectorXd& b) {
  VectorXd out(a.size() * b.size());
  for (Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a(i) * b;
  return out;
}

void flip_rowcol(MatrixXd& m, Index c) {
  m.row(c) *= -1.0;
  m.col(c) *= -1.0;
}

// Sign pattern of vec(S G S) relative to vec(G), S = diag(s).
VectorXd g_signs(Index q, Index c) {
  VectorXd s = VectorXd::Ones(q);
  s(c) = -1.0;
  VectorXd out(q * q);
  for (Index b = 0; b < q; ++b)
    for (Index a = 0; a < q; ++a) out(b * q + a) = s(a) * s(b);
  return out;
}

// Sign pattern of vecl(H S) relative to vecl(H).
VectorXd h_signs(Index p, Index q, Index c) {
  VectorXd out = VectorXd::Ones(vecl_size(p, q));
  Index pos = 0;
  for (Index col = 0; col < q; ++col)
    for (Index row = col; row < p; ++row) {
      if (col == c) out(pos) = -1.0;
      ++pos;
    }
  return out;
}

void apply_signs(const VectorXd& s, VectorXd& v) { v = v.cwiseProduct(s); }
void apply_signs(const VectorXd& s, MatrixXd& m) { m = m.cwiseProduct(s * s.transpose()); }

struct PooledStats {
  MatrixXd q_prev_sum;  // sum_{t>=2} Q_{t-1}
  MatrixXd q_lag_sum;   // sum_{t>=2} Q_{t,t-1}
  MatrixXd q_sum;       // sum_t Q_t
  VectorXd md_sum;      // sum_t m_t (x) R^{-1} D_t
};

PooledStats pooled_stats(const kalman::SmootherMoments& sm, const MatrixXd& seq,
                         const VectorXd& r) {
  const Index q = sm.m_hat.front().size();
  const Index p = seq.cols();
  PooledStats s;
  s.q_prev_sum = MatrixXd::Zero(q, q);
  s.q_lag_sum = MatrixXd::Zero(q, q);
  s.q_sum = MatrixXd::Zero(q, q);
  s.md_sum = VectorXd::Zero(p * q);
  const VectorXd rinv = r.cwiseInverse();
  const Index T = sm.length();
  for (Index t = 0; t < T; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    s.q_sum += sm.Q_hat[ts];
    s.md_sum += vkron(sm.m_hat[ts], rinv.cwiseProduct(seq.row(t).transpose()));
    if (t + 1 < T) {
      s.q_prev_sum += sm.Q_hat[ts];
      s.q_lag_sum += sm.Q_lag[ts];
    }
  }
  return s;
}

// r_j = (1/N) sum [D_tj^2 - 2 D_tj (Hbar m_t)_j + tr(A_j^T Q_t A_j M_h)]
// accumulated over subjects; A_j = (I_q (x) e_j^T) S_H.
void accumulate_r(VectorXd& acc, const MatrixXd& s_h, const MatrixXd& seq,
                  const kalman::SmootherMoments& sm, const VectorXd& nu_h, const MatrixXd& m_h) {
  const Index p = seq.cols();
  const Index q = sm.m_hat.front().size();
  const MatrixXd hbar = unvecl(nu_h, p, q);
  MatrixXd q_sum = MatrixXd::Zero(q, q);
  for (Index t = 0; t < sm.length(); ++t) {
    const auto ts = static_cast<std::size_t>(t);
    q_sum += sm.Q_hat[ts];
    const VectorXd pred = hbar * sm.m_hat[ts];
    for (Index j = 0; j < p; ++j) acc(j) += seq(t, j) * seq(t, j) - 2.0 * seq(t, j) * pred(j);
  }
  for (Index j = 0; j < p; ++j) {
    MatrixXd a(q, s_h.cols());
    for (Index c = 0; c < q; ++c) a.row(c) = s_h.row(c * p + j);
    acc(j) += (a.transpose() * q_sum * a * m_h).trace();
  }
}

void flip_params(MessmParams& pr, Index c) {
  const Index q = pr.state_dim();
  const Index p = pr.obs_dim();
  const VectorXd sg = g_signs(q, c);
  const VectorXd sh = h_signs(p, q, c);
  apply_signs(sg, pr.mu_g);
  apply_signs(sg, pr.sigma_g);
  apply_signs(sh, pr.mu_h);
  apply_signs(sh, pr.sigma_h);
  pr.m0(c) = -pr.m0(c);
  flip_rowcol(pr.P0, c);
}

}  // namespace

MatrixXd MessmParams::mean_G() const { return unvec(mu_g, state_dim(), state_dim()); }
MatrixXd MessmParams::mean_H() const { return unvecl(mu_h, obs_dim(), state_dim()); }

void MessmParams::validate() const {
  const Index q = state_dim();
  const Index p = obs_dim();
  if (q < 1 || p < q) throw DimensionError("MessmParams: need p >= q >= 1");
  if (P0.rows() != q || P0.cols() != q || !is_spd(P0))
    throw DimensionError("MessmParams: P0 must be q x q PD");
  if ((r.array() <= 0.0).any()) throw DimensionError("MessmParams: r entries must be positive");
  if (mu_g.size() != q * q || sigma_g.rows() != q * q || !is_spd(sigma_g))
    throw DimensionError("MessmParams: (mu_g, Sigma_g) must be q^2-dimensional with PD Sigma_g");
  const Index lh = vecl_size(p, q);
  if (mu_h.size() != lh || sigma_h.rows() != lh || !is_spd(sigma_h))
    throw DimensionError("MessmParams: (mu_h, Sigma_h) must be L_h-dimensional with PD Sigma_h");
}

Index vecl_size(Index p, Index q) { return p * q - q * (q - 1) / 2; }

MatrixXd build_s_h(Index p, Index q) {
  if (q < 1 || p < q) throw DimensionError("build_s_h: loading must be lower-trapezoidal (p >= q >= 1)");
  MatrixXd s = MatrixXd::Zero(p * q, vecl_size(p, q));
  Index pos = 0;
  for (Index c = 0; c < q; ++c)
    for (Index row = c; row < p; ++row) s(c * p + row, pos++) = 1.0;
  return s;
}

VectorXd vec(const MatrixXd& a) { return Eigen::Map<const VectorXd>(a.data(), a.size()); }

MatrixXd unvec(const VectorXd& v, Index rows, Index cols) {
  if (v.size() != rows * cols) throw DimensionError("unvec: size mismatch");
  return Eigen::Map<const MatrixXd>(v.data(), rows, cols);
}

VectorXd vecl(const MatrixXd& h) {
  const Index p = h.rows();
  const Index q = h.cols();
  if (p < q) throw DimensionError("vecl: need rows >= cols");
  VectorXd out(vecl_size(p, q));
  Index pos = 0;
  for (Index c = 0; c < q; ++c)
    for (Index row = c; row < p; ++row) out(pos++) = h(row, c);
  return out;
}

MatrixXd unvecl(const VectorXd& h, Index p, Index q) {
  if (h.size() != vecl_size(p, q)) throw DimensionError("unvecl: size mismatch");
  MatrixXd out = MatrixXd::Zero(p, q);
  Index pos = 0;
  for (Index c = 0; c < q; ++c)
    for (Index row = c; row < p; ++row) out(row, c) = h(pos++);
  return out;
}

kalman::LgssmSpec anchored_spec(const MessmParams& params, const VectorXd& g0,
                                const VectorXd& h0) {
  const Index q = params.state_dim();
  const Index p = params.obs_dim();
  if (!g0.allFinite() || !h0.allFinite()) throw DimensionError("anchored_smoother: anchor not finite");
  return {unvec(g0, q, q), unvecl(h0, p, q), params.r, params.m0, params.P0};
}

kalman::SmootherMoments anchored_smoother(const MessmParams& params, const MatrixXd& seq,
                                          const VectorXd& g0, const VectorXd& h0,
                                          double* log_likelihood) {
  return kalman::smooth(anchored_spec(params, g0, h0), seq, log_likelihood);
}

QFactor update_q_g(const MessmParams& params, const kalman::SmootherMoments& moments) {
  const Index q = params.state_dim();
  const MatrixXd prec_prior = spd_inverse(params.sigma_g, "Sigma_g");
  MatrixXd lambda = prec_prior;
  VectorXd eta = prec_prior * params.mu_g;
  for (Index t = 0; t + 1 < moments.length(); ++t) {
    const auto ts = static_cast<std::size_t>(t);
    lambda += kron(moments.Q_hat[ts], MatrixXd::Identity(q, q));
    eta += vec(moments.Q_lag[ts]);
  }
  lambda = symmetrize(lambda);
  const auto llt = checked_llt(lambda, "Lambda_g");
  const MatrixXd omega = spd_inverse(lambda, "Lambda_g");
  return {llt.solve(eta), omega};
}

QFactor update_q_h(const MessmParams& params, const kalman::SmootherMoments& moments,
                   const MatrixXd& seq) {
  const Index q = params.state_dim();
  const Index p = params.obs_dim();
  if (seq.cols() != p || seq.rows() != moments.length())
    throw DimensionError("update_q_h: data and moments disagree");
  const MatrixXd s_h = build_s_h(p, q);
  const MatrixXd prec_prior = spd_inverse(params.sigma_h, "Sigma_h");
  const PooledStats st = pooled_stats(moments, seq, params.r);
  const MatrixXd rinv = params.r.cwiseInverse().asDiagonal();
  MatrixXd lambda = prec_prior + s_h.transpose() * kron(st.q_sum, rinv) * s_h;
  lambda = symmetrize(lambda);
  const VectorXd eta = prec_prior * params.mu_h + s_h.transpose() * st.md_sum;
  const auto llt = checked_llt(lambda, "Lambda_h");
  return {llt.solve(eta), spd_inverse(lambda, "Lambda_h")};
}

MessmParams m_step_messm(const MessmParams& shape, const std::vector<SubjectEffects>& effects,
                         const std::vector<kalman::SmootherMoments>& moments,
                         const Dataset& data) {
  const std::size_t n = data.size();
  if (n == 0 || effects.size() != n || moments.size() != n)
    throw DimensionError("m_step_messm: subject counts differ");
  const Index q = shape.state_dim();
  const Index p = shape.obs_dim();
  const double dn = static_cast<double>(n);
  MessmParams out = shape;

  out.mu_g = VectorXd::Zero(q * q);
  out.mu_h = VectorXd::Zero(vecl_size(p, q));
  out.m0 = VectorXd::Zero(q);
  for (std::size_t i = 0; i < n; ++i) {
    out.mu_g += effects[i].q_g.nu;
    out.mu_h += effects[i].q_h.nu;
    out.m0 += moments[i].m_hat.front();
  }
  out.mu_g /= dn;
  out.mu_h /= dn;
  out.m0 /= dn;

  out.sigma_g = MatrixXd::Zero(q * q, q * q);
  out.sigma_h = MatrixXd::Zero(out.mu_h.size(), out.mu_h.size());
  out.P0 = MatrixXd::Zero(q, q);
  for (std::size_t i = 0; i < n; ++i) {
    const VectorXd dg = effects[i].q_g.nu - out.mu_g;
    const VectorXd dh = effects[i].q_h.nu - out.mu_h;
    const VectorXd dm = moments[i].m_hat.front() - out.m0;
    out.sigma_g += effects[i].q_g.omega + dg * dg.transpose();
    out.sigma_h += effects[i].q_h.omega + dh * dh.transpose();
    out.P0 += moments[i].P_hat.front() + dm * dm.transpose();
  }
  out.sigma_g = symmetrize(out.sigma_g / dn);
  out.sigma_h = symmetrize(out.sigma_h / dn);
  out.P0 = symmetrize(out.P0 / dn);

  const MatrixXd s_h = build_s_h(p, q);
  VectorXd acc = VectorXd::Zero(p);
  double total_t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& qh = effects[i].q_h;
    accumulate_r(acc, s_h, data[i], moments[i], qh.nu, qh.omega + qh.nu * qh.nu.transpose());
    total_t += static_cast<double>(data[i].rows());
  }
  out.r = (acc / total_t).cwiseMax(1e-10);
  return out;
}

void flip_coordinate(Index c, Index p, Index q, SubjectEffects& effects,
                     kalman::SmootherMoments& moments) {
  if (c < 0 || c >= q) throw DimensionError("flip_coordinate: coordinate out of range");
  const VectorXd sg = g_signs(q, c);
  const VectorXd sh = h_signs(p, q, c);
  apply_signs(sg, effects.q_g.nu);
  apply_signs(sg, effects.q_g.omega);
  apply_signs(sh, effects.q_h.nu);
  apply_signs(sh, effects.q_h.omega);
  if (effects.g0.size() == sg.size()) apply_signs(sg, effects.g0);
  if (effects.h0.size() == sh.size()) apply_signs(sh, effects.h0);
  for (auto& m : moments.m_hat) m(c) = -m(c);
  for (auto* group : {&moments.P_hat, &moments.P_lag, &moments.Q_hat, &moments.Q_lag})
    for (auto& m : *group) flip_rowcol(m, c);
}

SignAlignment sign_align(const MatrixXd& group_h, SubjectEffects& effects,
                         kalman::SmootherMoments& moments) {
  const Index p = group_h.rows();
  const Index q = group_h.cols();
  const MatrixXd hbar = unvecl(effects.q_h.nu, p, q);
  SignAlignment out;
  for (Index c = 0; c < q; ++c) {
    const double na = hbar.col(c).norm();
    const double nb = group_h.col(c).norm();
    if (na == 0.0 || nb == 0.0) {
      out.skipped.push_back(c);
      continue;
    }
    if (hbar.col(c).dot(group_h.col(c)) < 0.0) {
      flip_coordinate(c, p, q, effects, moments);
      out.flipped.push_back(c);
    }
  }
  return out;
}

ElboTerms subject_elbo(const MessmParams& params, const MatrixXd& seq,
                       const SubjectEffects& effects, const kalman::SmootherMoments& moments) {
  const Index q = params.state_dim();
  const Index p = params.obs_dim();
  const Index T = moments.length();
  if (T != seq.rows() || T < 1) throw DimensionError("subject_elbo: data and moments disagree");
  ElboTerms e;
  const double dq = static_cast<double>(q);

  const MatrixXd p0inv = spd_inverse(params.P0, "P0");
  const VectorXd d1 = moments.m_hat.front() - params.m0;
  e.initial = -0.5 * (dq * kLog2Pi + spd_log_det(params.P0, "P0") +
                      (p0inv * (moments.P_hat.front() + d1 * d1.transpose())).trace());

  const PooledStats st = pooled_stats(moments, seq, params.r);
  const auto& qg = effects.q_g;
  const MatrixXd mg = qg.omega + qg.nu * qg.nu.transpose();
  const double t_pairs = static_cast<double>(T - 1);
  const double q_next = (st.q_sum - moments.Q_hat.front()).trace();
  e.transition = -0.5 * (t_pairs * dq * kLog2Pi + q_next - 2.0 * qg.nu.dot(vec(st.q_lag_sum)) +
                         (kron(st.q_prev_sum, MatrixXd::Identity(q, q)) * mg).trace());

  const auto& qh = effects.q_h;
  const MatrixXd s_h = build_s_h(p, q);
  const MatrixXd mh = qh.omega + qh.nu * qh.nu.transpose();
  const MatrixXd rinv = params.r.cwiseInverse().asDiagonal();
  double log_norm = 0.0;
  for (Index j = 0; j < p; ++j) log_norm += kLog2Pi + std::log(params.r(j));
  double quad = 0.0;
  for (Index t = 0; t < T; ++t) quad += seq.row(t).cwiseAbs2().dot(params.r.cwiseInverse().transpose());
  e.emission = -0.5 * (static_cast<double>(T) * log_norm + quad -
                       2.0 * (s_h * qh.nu).dot(st.md_sum) +
                       (s_h.transpose() * kron(st.q_sum, rinv) * s_h * mh).trace());

  e.entropy = kalman::smoother_entropy(moments);
  e.kl_g = gaussian_kl(qg.nu, qg.omega, params.mu_g, params.sigma_g);
  e.kl_h = gaussian_kl(qh.nu, qh.omega, params.mu_h, params.sigma_h);
  return e;
}

void MessmConfig::validate() const {
  if (max_iter < 1) throw ConfigError("max_iter must be positive", "max_iter");
  if (!(rel_tol > 0.0)) throw ConfigError("rel_tol must be positive", "rel_tol");
}

MessmFitReport fit_messm(const Dataset& data, const MessmParams& init, const MessmConfig& config) {
  data.validate();
  init.validate();
  config.validate();
  if (data.obs_dim() != init.obs_dim())
    throw DimensionError("fit_messm: data width does not match the loading rows");

  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = data.size();
  const unsigned threads = resolve_threads(config.threads);

  MessmFitReport rep;
  rep.params = init;
  rep.effects.assign(n, SubjectEffects{{init.mu_g, init.sigma_g}, {init.mu_h, init.sigma_h},
                                       init.mu_g, init.mu_h});
  std::vector<kalman::SmootherMoments> moments(n);
  std::vector<SignAlignment> aligned(n);
  std::vector<double> subject(n);
  double prev = 0.0;

  for (int iter = 1; iter <= config.max_iter; ++iter) {
    const MatrixXd group_h = rep.params.mean_H();
    parallel_for(n, threads, [&](std::size_t i) {
      SubjectEffects& ef = rep.effects[i];
      ef.g0 = ef.q_g.nu;
      ef.h0 = ef.q_h.nu;
      moments[i] = anchored_smoother(rep.params, data[i], ef.g0, ef.h0);
      ef.q_g = update_q_g(rep.params, moments[i]);
      ef.q_h = update_q_h(rep.params, moments[i], data[i]);
      aligned[i] = config.sign_align ? sign_align(group_h, ef, moments[i]) : SignAlignment{};
    });
    rep.smoother_passes.push_back(n);
    for (std::size_t i = 0; i < n; ++i)
      for (Index c : aligned[i].skipped)
        rep.warnings.push_back("iteration " + std::to_string(iter) + ": subject " +
                               std::to_string(i) + " loading column " + std::to_string(c) +
                               " has zero norm; sign alignment skipped");

    MessmParams next = m_step_messm(rep.params, rep.effects, moments, data);
    if (!config.update_sigma) {
      next.sigma_g = rep.params.sigma_g;
      next.sigma_h = rep.params.sigma_h;
    }
    rep.params = std::move(next);

    parallel_for(n, threads, [&](std::size_t i) {
      subject[i] = subject_elbo(rep.params, data[i], rep.effects[i], moments[i]).total();
    });
    const double elbo = std::accumulate(subject.begin(), subject.end(), 0.0);
    if (!std::isfinite(elbo))
      throw NumericalError("fit_messm: non-finite ELBO at iteration " + std::to_string(iter));
    rep.elbo_trace.push_back(elbo);
    rep.n_iter = iter;
    if (iter > 1 && std::abs(elbo - prev) <= config.rel_tol * std::abs(prev)) {
      rep.converged = true;
      break;
    }
    prev = elbo;
  }
  if (!rep.converged)
    rep.warnings.push_back("reached max_iter = " + std::to_string(config.max_iter) +
                           " without meeting the ELBO tolerance");
  rep.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

ReducedFit fit_reduced(const Dataset& data, const MatrixXd& G, const MatrixXd& H,
                       const VectorXd& r, const VectorXd& m0, const MatrixXd& P0, int max_iter,
                       double rel_tol) {
  data.validate();
  const Index q = G.rows();
  const Index p = H.rows();
  if (data.obs_dim() != p) throw DimensionError("fit_reduced: data width does not match H");
  ReducedFit fit{G, unvecl(vecl(H), p, q), r, m0, P0, {}, 0};
  const MatrixXd s_h = build_s_h(p, q);
  const std::size_t n = data.size();
  double prev = 0.0;
  for (int iter = 1; iter <= max_iter; ++iter) {
    const kalman::LgssmSpec spec{fit.G, fit.H, fit.r, fit.m0, fit.P0};
    std::vector<kalman::SmootherMoments> sm(n);
    double ll = 0.0;
    MatrixXd lam_g = MatrixXd::Zero(q * q, q * q);
    VectorXd eta_g = VectorXd::Zero(q * q);
    MatrixXd q_all = MatrixXd::Zero(q, q);
    VectorXd md_all = VectorXd::Zero(p * q);
    for (std::size_t i = 0; i < n; ++i) {
      double lli = 0.0;
      sm[i] = kalman::smooth(spec, data[i], &lli);
      ll += lli;
      const PooledStats st = pooled_stats(sm[i], data[i], fit.r);
      lam_g += kron(st.q_prev_sum, MatrixXd::Identity(q, q));
      eta_g += vec(st.q_lag_sum);
      q_all += st.q_sum;
      md_all += st.md_sum;
    }
    fit.loglik_trace.push_back(ll);
    fit.n_iter = iter;
    if (iter > 1 && std::abs(ll - prev) <= rel_tol * std::abs(prev)) break;
    prev = ll;

    if (lam_g.norm() > 0.0) fit.G = unvec(checked_llt(symmetrize(lam_g), "pooled Lambda_g").solve(eta_g), q, q);
    const MatrixXd rinv = fit.r.cwiseInverse().asDiagonal();
    const MatrixXd lam_h = symmetrize(s_h.transpose() * kron(q_all, rinv) * s_h);
    const VectorXd h = checked_llt(lam_h, "pooled Lambda_h").solve(s_h.transpose() * md_all);
    fit.H = unvecl(h, p, q);

    VectorXd acc = VectorXd::Zero(p);
    double total_t = 0.0;
    fit.m0.setZero();
    for (std::size_t i = 0; i < n; ++i) {
      accumulate_r(acc, s_h, data[i], sm[i], h, h * h.transpose());
      total_t += static_cast<double>(data[i].rows());
      fit.m0 += sm[i].m_hat.front();
    }
    fit.r = (acc / total_t).cwiseMax(1e-10);
    fit.m0 /= static_cast<double>(n);
    MatrixXd p0 = MatrixXd::Zero(q, q);
    for (std::size_t i = 0; i < n; ++i) {
      const VectorXd dm = sm[i].m_hat.front() - fit.m0;
      p0 += sm[i].P_hat.front() + dm * dm.transpose();
    }
    fit.P0 = symmetrize(p0 / static_cast<double>(n));
  }
  return fit;
}

MessmParams align_signs(const MessmParams& params, const MatrixXd* reference) {
  MessmParams out = params;
  const MatrixXd h = params.mean_H();
  for (Index c = 0; c < params.state_dim(); ++c) {
    const double score = reference ? h.col(c).dot(reference->col(c)) : h(c, c);
    if (score < 0.0) flip_params(out, c);
  }
  return out;
}

MessmParams default_init_messm(const Dataset& data, Index q, double sigma_scale) {
  data.validate();
  const Index p = data.obs_dim();
  if (q < 1 || p < q) throw DimensionError("default_init_messm: need p >= q >= 1");
  MatrixXd all(data.total_length(), p);
  Index row = 0;
  for (const auto& s : data.sequences) {
    all.middleRows(row, s.rows()) = s;
    row += s.rows();
  }
  const MatrixXd centered = all.rowwise() - all.colwise().mean();
  const MatrixXd cov = symmetrize(centered.transpose() * centered / static_cast<double>(all.rows()));
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
  const VectorXd vals = eig.eigenvalues();
  double noise = 0.0;
  for (Index j = 0; j < p - q; ++j) noise += vals(j);
  noise = p > q ? noise / static_cast<double>(p - q) : 0.1 * vals.mean();
  MatrixXd h0(p, q);
  // Stationary latent variance with G = 0.5 I and unit noise is 4/3.
  for (Index c = 0; c < q; ++c) {
    const Index j = p - 1 - c;
    h0.col(c) = eig.eigenvectors().col(j) * std::sqrt(std::max(vals(j) - noise, 1e-3) * 0.75);
  }
  Eigen::HouseholderQR<MatrixXd> qr(h0.transpose());
  MatrixXd h = MatrixXd(qr.matrixQR().triangularView<Eigen::Upper>()).transpose();
  for (Index c = 0; c < q; ++c)
    if (h(c, c) < 0.0) h.col(c) *= -1.0;
  VectorXd r(p);
  const MatrixXd implied = h * h.transpose() * (4.0 / 3.0);
  for (Index j = 0; j < p; ++j) r(j) = std::max(cov(j, j) - implied(j, j), 0.05 * cov(j, j));
  r = r.cwiseMax(1e-6);

  const ReducedFit red = fit_reduced(data, 0.5 * MatrixXd::Identity(q, q), h, r,
                                     VectorXd::Zero(q), MatrixXd::Identity(q, q), 200, 1e-8);
  MessmParams out;
  out.m0 = red.m0;
  out.P0 = red.P0;
  out.r = red.r;
  out.mu_g = vec(red.G);
  out.sigma_g = sigma_scale * MatrixXd::Identity(q * q, q * q);
  out.mu_h = vecl(red.H);
  out.sigma_h = sigma_scale * MatrixXd::Identity(out.mu_h.size(), out.mu_h.size());
  return align_signs(out);
}

}  // namespace avem::messm
