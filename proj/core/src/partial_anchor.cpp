#include "avem/partial_anchor.hpp"

#include "avem/error.hpp"
#include "avem/parallel.hpp"
#include "avem/quadrature.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace avem::pavem {

LocalizedGaussianEmission::LocalizedGaussianEmission(MatrixXd mu, VectorXd sigma2, Index t0,
                                                     double tau_a2, double tau_b2)
    : LinearGaussianEmission(std::move(mu), std::move(sigma2)),
      t0_(t0),
      tau_a2_(tau_a2),
      tau_b2_(tau_b2) {
  if (t0 < 0) throw DimensionError("LocalizedGaussianEmission: t0 must be nonnegative");
  if (!(tau_a2 > 0.0) || !(tau_b2 > 0.0))
    throw DimensionError("LocalizedGaussianEmission: prior variances must be positive");
}

MatrixXd LocalizedGaussianEmission::design(Index t) const {
  MatrixXd z(obs_dim(), 2);
  z.col(0).setOnes();
  z.col(1).setConstant(t < t0_ ? 1.0 : 0.0);
  return z;
}

VectorXd LocalizedGaussianEmission::shift(Index t, const VectorXd& f) const {
  return VectorXd::Constant(obs_dim(), t < t0_ ? f(0) + f(1) : f(0));
}

std::unique_ptr<LinearGaussianEmission> LocalizedGaussianEmission::with_parameters(
    MatrixXd mu, VectorXd sigma2) const {
  return std::make_unique<LocalizedGaussianEmission>(std::move(mu), std::move(sigma2), t0_,
                                                     tau_a2_, tau_b2_);
}

std::unique_ptr<EmissionModel> LocalizedGaussianEmission::clone() const {
  return std::make_unique<LocalizedGaussianEmission>(*this);
}

void PavemParams::validate() const {
  base.validate();
  if (base.effect_dim() != 1) throw DimensionError("PAVEM: anchored effect must be scalar");
  if (!dynamic_cast<const LinearGaussianEmission*>(base.emission.get()))
    throw DimensionError("PAVEM: emission must be linear-Gaussian");
  if (t0 < 0) throw DimensionError("PAVEM: t0 must be nonnegative");
  if (!(tau_b2 > 0.0)) throw DimensionError("PAVEM: tau_b2 must be positive");
}

MatrixXd localized_log_emissions(const PavemParams& params, const MatrixXd& seq, double fa,
                                 double fb) {
  const EmissionModel& em = *params.base.emission;
  const Index K = em.n_states();
  MatrixXd out(seq.rows(), K);
  VectorXd f_early(1), f_late(1);
  f_early(0) = fa + fb;
  f_late(0) = fa;
  for (Index t = 0; t < seq.rows(); ++t) {
    const VectorXd& f = t < params.t0 ? f_early : f_late;
    for (Index k = 0; k < K; ++k) out(t, k) = em.log_e(k, t, f, seq);
  }
  return out;
}

namespace {

struct Grid {
  VectorXd nodes;
  VectorXd log_prior;
};

Grid make_grid(int J, double tau_b2) {
  if (J < 1) throw DimensionError("PAVEM: node count must be positive");
  const GaussHermiteRule rule = gauss_hermite(J);
  Grid g;
  g.nodes = std::sqrt(tau_b2) * rule.nodes;
  g.log_prior = rule.weights.array().log();
  return g;
}

VectorXd normalized_weights(VectorXd row, double* log_evidence) {
  const double lse = log_sum_exp(row);
  if (!std::isfinite(lse)) throw NumericalError("PAVEM: grid weights vanish for a subject");
  for (Index j = 0; j < row.size(); ++j) row(j) = std::exp(row(j) - lse);
  row /= row.sum();
  if (log_evidence) *log_evidence = lse;
  return row;
}

struct SubjectState {
  hmm::StatePosterior mixed;
  mhmm::detail::OffsetMoments off;
  double entropy = 0.0;  // sum_j w_j H_j
  double kl_grid = 0.0;  // KL(w || v)
  GridFactor grid;
};

}  // namespace

GridFactor update_grid_factor(const PavemParams& params, const MatrixXd& seq, double f0_a, int J) {
  params.validate();
  const Grid g = make_grid(J, params.tau_b2);
  VectorXd row(J);
  for (Index j = 0; j < J; ++j)
    row(j) = g.log_prior(j) +
             hmm::conditional_log_marginal(hmm::forward_pass(
                 localized_log_emissions(params, seq, f0_a, g.nodes(j)), params.base.chain));
  return {g.nodes, normalized_weights(row, nullptr)};
}

PavemReport fit_pavem(const Dataset& data, const PavemParams& init, const PavemConfig& config) {
  data.validate();
  init.validate();
  config.avem.validate();
  if (config.n_nodes < 1) throw ConfigError("PAVEM needs at least one node", "n_nodes");
  if (init.base.emission->obs_dim() != data.obs_dim())
    throw DimensionError("fit_pavem: emission dimension does not match the data");

  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = data.size();
  const int J = config.n_nodes;
  const unsigned threads = resolve_threads(config.avem.threads);

  PavemReport rep;
  mhmm::FitReport& fit = rep.fit;
  fit.params = init.base;
  fit.q_factors.assign(n, mhmm::QFactor{VectorXd::Zero(1), init.base.sigma});
  fit.anchors.assign(n, VectorXd::Zero(1));
  double tau_b2 = init.tau_b2;
  std::vector<SubjectState> states(n);
  std::vector<double> subject_elbo(n);
  double prev = 0.0;

  for (int iter = 1; iter <= config.avem.max_iter; ++iter) {
    mhmm::MhmmParams& p = fit.params;
    const auto& lg = dynamic_cast<const LinearGaussianEmission&>(*p.emission);
    PavemParams cur{p, init.t0, tau_b2};
    const Grid grid = make_grid(J, tau_b2);
    for (std::size_t i = 0; i < n; ++i) fit.anchors[i] = fit.q_factors[i].nu;

    parallel_for(n, threads, [&](std::size_t i) {
      const MatrixXd& seq = data[i];
      const Index T = seq.rows();
      const Index K = p.chain.n_states();
      const double fa = fit.anchors[i](0);
      std::vector<hmm::StatePosterior> node_posts(static_cast<std::size_t>(J));
      VectorXd row(J);
      for (Index j = 0; j < J; ++j) {
        auto& np = node_posts[static_cast<std::size_t>(j)];
        np = hmm::forward_backward(localized_log_emissions(cur, seq, fa, grid.nodes(j)), p.chain);
        row(j) = grid.log_prior(j) + np.log_marginal;
      }
      const VectorXd w = normalized_weights(row, nullptr);

      SubjectState& st = states[i];
      st.grid = {grid.nodes, w};
      st.mixed.zeta = MatrixXd::Zero(T, K);
      st.mixed.xi.assign(static_cast<std::size_t>(T - 1), MatrixXd::Zero(K, K));
      st.off.first.assign(static_cast<std::size_t>(K), MatrixXd::Zero(T, seq.cols()));
      st.off.second = MatrixXd::Zero(T, K);
      st.entropy = 0.0;
      st.kl_grid = 0.0;
      for (Index j = 0; j < J; ++j) {
        const auto& np = node_posts[static_cast<std::size_t>(j)];
        const double wj = w(j);
        st.mixed.zeta += wj * np.zeta;
        for (std::size_t t = 0; t < st.mixed.xi.size(); ++t) st.mixed.xi[t] += wj * np.xi[t];
        const double b = grid.nodes(j);
        for (Index t = 0; t < std::min(T, init.t0); ++t)
          for (Index k = 0; k < K; ++k) {
            const double m = wj * np.zeta(t, k);
            st.off.first[static_cast<std::size_t>(k)].row(t).array() += m * b;
            st.off.second(t, k) += m * b * b * static_cast<double>(seq.cols());
          }
        st.entropy += wj * hmm::posterior_entropy(np);
        if (wj > 0.0) st.kl_grid += wj * (std::log(wj) - grid.log_prior(j));
      }
      st.mixed.log_marginal = 0.0;
      fit.q_factors[i] = mhmm::detail::closed_form_q(lg, p.sigma, seq, st.mixed.zeta, &st.off);
    });
    fit.forward_passes.push_back(n * static_cast<std::uint64_t>(J));

    std::vector<hmm::StatePosterior> mixed(n);
    std::vector<MatrixXd> zetas(n);
    std::vector<mhmm::detail::OffsetMoments> offs(n);
    for (std::size_t i = 0; i < n; ++i) {
      mixed[i] = states[i].mixed;
      zetas[i] = states[i].mixed.zeta;
      offs[i] = states[i].off;
    }
    p.chain.pi = mhmm::m_step_pi(mixed);
    mhmm::GammaUpdate gu = mhmm::m_step_gamma(mixed);
    p.chain.gamma = std::move(gu.gamma);
    for (Index k : gu.degenerate_rows)
      fit.warnings.push_back("iteration " + std::to_string(iter) + ": transition row " +
                             std::to_string(k) + " had no expected visits and was set uniform");
    p.emission = mhmm::detail::gaussian_m_step(lg, data, zetas, fit.q_factors, offs);
    if (config.avem.update_sigma) p.sigma = mhmm::m_step_sigma(fit.q_factors);
    if (config.update_tau_b2 && J > 1) {
      double acc = 0.0;
      for (const auto& st : states)
        for (Index j = 0; j < J; ++j) acc += st.grid.weights(j) * st.grid.nodes(j) * st.grid.nodes(j);
      tau_b2 = std::max(1e-10, acc / static_cast<double>(n));
    }

    const auto& lg_new = dynamic_cast<const LinearGaussianEmission&>(*p.emission);
    parallel_for(n, threads, [&](std::size_t i) {
      const SubjectState& st = states[i];
      mhmm::ElboTerms e;
      e.emission = mhmm::detail::gaussian_expected_loglik(lg_new, data[i], st.mixed.zeta,
                                                          fit.q_factors[i], &st.off);
      e.initial = mhmm::detail::initial_term(p.chain.pi, st.mixed.zeta);
      e.transition = mhmm::detail::transition_term(p.chain.gamma, st.mixed.xi);
      e.kl = gaussian_kl(fit.q_factors[i].nu, fit.q_factors[i].omega, VectorXd::Zero(1), p.sigma);
      e.entropy = st.entropy;
      subject_elbo[i] = e.total() - st.kl_grid;
    });
    const double elbo = std::accumulate(subject_elbo.begin(), subject_elbo.end(), 0.0);
    if (!std::isfinite(elbo))
      throw NumericalError("fit_pavem: non-finite ELBO at iteration " + std::to_string(iter));
    fit.elbo_trace.push_back(elbo);
    fit.n_iter = iter;
    if (iter > 1 && std::abs(elbo - prev) <= config.avem.rel_tol * std::abs(prev)) {
      fit.converged = true;
      break;
    }
    prev = elbo;
  }
  if (!fit.converged)
    fit.warnings.push_back("reached max_iter = " + std::to_string(config.avem.max_iter) +
                           " without meeting the ELBO tolerance");
  rep.tau_b2 = tau_b2;
  rep.grids.reserve(n);
  for (const auto& st : states) {
    rep.grids.push_back(st.grid);
    rep.fb_hat.push_back(st.grid.mean());
  }
  fit.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace avem::pavem
