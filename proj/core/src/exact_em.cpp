#include "avem/exact_em.hpp"

#include "avem/error.hpp"
#include "avem/parallel.hpp"
#include "avem/quadrature.hpp"
#include "avem/rng.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace avem::exact {

NodeSet gh_tensor_nodes(int j_per_dim, int d, double tau2) {
  if (j_per_dim < 1 || d < 1) throw DimensionError("gh_tensor_nodes: J and d must be positive");
  if (!(tau2 > 0.0)) throw DimensionError("gh_tensor_nodes: tau2 must be positive");
  const TensorRule rule = gauss_hermite_tensor(j_per_dim, d);
  return {std::sqrt(tau2) * rule.nodes, rule.weights, NodeKind::gauss_hermite};
}

NodeSet mc_nodes(int m, int d, double tau2, std::uint64_t seed) {
  if (m < 1 || d < 1) throw DimensionError("mc_nodes: sample count and d must be positive");
  if (!(tau2 > 0.0)) throw DimensionError("mc_nodes: tau2 must be positive");
  Rng rng(seed);
  NormalSampler normal;
  const double s = std::sqrt(tau2);
  MatrixXd nodes(m, d);
  for (Index j = 0; j < m; ++j)
    for (Index c = 0; c < d; ++c) nodes(j, c) = s * normal(rng);
  return {nodes, VectorXd::Ones(m), NodeKind::monte_carlo};
}

namespace {

VectorXd log_prior_weights(const NodeSet& nodes) {
  const double total = nodes.weights.sum();
  VectorXd lv(nodes.size());
  for (Index j = 0; j < nodes.size(); ++j) lv(j) = std::log(nodes.weights(j) / total);
  return lv;
}

// Normalizes log v_j + log p(D | f_j) in place; returns the log evidence.
double normalize_row(Eigen::Ref<VectorXd> row, std::size_t subject) {
  const double lse = log_sum_exp(row);
  if (!std::isfinite(lse))
    throw NumericalError("node posterior weights vanish for subject " + std::to_string(subject) +
                         "; posterior mass lies outside the node range, increase the node count"
                         " or check the random-effect variance");
  for (Index j = 0; j < row.size(); ++j) row(j) = std::exp(row(j) - lse);
  row /= row.sum();
  return lse;
}

struct SubjectWork {
  std::vector<MatrixXd> zetas;  // per node
  hmm::StatePosterior mixed;    // weight-averaged zeta and xi
  VectorXd w;                   // normalized node weights
  double log_lik = 0.0;
};

mhmm::FitReport fit_nodes(const Dataset& data, const mhmm::MhmmParams& init,
                          const mhmm::AvemConfig& config,
                          const std::function<NodeSet(int, double)>& make_nodes) {
  data.validate();
  init.validate();
  if (config.max_iter < 1) throw ConfigError("max_iter must be positive", "max_iter");
  if (!(config.rel_tol > 0.0)) throw ConfigError("rel_tol must be positive", "rel_tol");
  if (init.emission->obs_dim() != data.obs_dim())
    throw DimensionError("exact EM: emission dimension does not match the data");

  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = data.size();
  const Index d = init.effect_dim();
  const unsigned threads = resolve_threads(config.threads);

  mhmm::FitReport rep;
  rep.params = init;
  double tau2 = init.sigma.trace() / static_cast<double>(d);
  rep.params.sigma = tau2 * MatrixXd::Identity(d, d);
  rep.q_factors.resize(n);
  std::vector<SubjectWork> work(n);
  double prev = 0.0;

  for (int iter = 1; iter <= config.max_iter; ++iter) {
    mhmm::MhmmParams& p = rep.params;
    const NodeSet nodes = make_nodes(iter, tau2);
    const Index J = nodes.size();
    const VectorXd lv = log_prior_weights(nodes);
    std::vector<VectorXd> points(static_cast<std::size_t>(J));
    for (Index j = 0; j < J; ++j) points[static_cast<std::size_t>(j)] = nodes.nodes.row(j).transpose();

    parallel_for(n, threads, [&](std::size_t i) {
      const MatrixXd& seq = data[i];
      SubjectWork& sw = work[i];
      std::vector<hmm::StatePosterior> node_posts(static_cast<std::size_t>(J));
      VectorXd row(J);
      for (Index j = 0; j < J; ++j) {
        auto& np = node_posts[static_cast<std::size_t>(j)];
        np = hmm::forward_backward(
            p.emission->log_emission_matrix(points[static_cast<std::size_t>(j)], seq), p.chain);
        row(j) = lv(j) + np.log_marginal;
      }
      sw.log_lik = normalize_row(row, i);
      sw.w = row;
      const Index T = seq.rows();
      const Index K = p.chain.n_states();
      sw.mixed.zeta = MatrixXd::Zero(T, K);
      sw.mixed.xi.assign(static_cast<std::size_t>(std::max<Index>(T - 1, 0)), MatrixXd::Zero(K, K));
      sw.zetas.resize(static_cast<std::size_t>(J));
      for (Index j = 0; j < J; ++j) {
        auto& np = node_posts[static_cast<std::size_t>(j)];
        sw.mixed.zeta += row(j) * np.zeta;
        for (std::size_t t = 0; t < sw.mixed.xi.size(); ++t) sw.mixed.xi[t] += row(j) * np.xi[t];
        sw.zetas[static_cast<std::size_t>(j)] = std::move(np.zeta);
      }
      VectorXd mean = VectorXd::Zero(d);
      for (Index j = 0; j < J; ++j) mean += row(j) * points[static_cast<std::size_t>(j)];
      MatrixXd cov = MatrixXd::Zero(d, d);
      for (Index j = 0; j < J; ++j) {
        const VectorXd c = points[static_cast<std::size_t>(j)] - mean;
        cov += row(j) * c * c.transpose();
      }
      rep.q_factors[i] = {mean, symmetrize(cov)};
    });
    rep.forward_passes.push_back(n * static_cast<std::uint64_t>(J));

    double loglik = 0.0;
    for (const auto& sw : work) loglik += sw.log_lik;
    if (!std::isfinite(loglik))
      throw NumericalError("exact EM: non-finite log-likelihood at iteration " + std::to_string(iter));
    rep.elbo_trace.push_back(loglik);
    rep.n_iter = iter;
    const bool converged = iter > 1 && std::abs(loglik - prev) <= config.rel_tol * std::abs(prev);

    std::vector<hmm::StatePosterior> mixed(n);
    for (std::size_t i = 0; i < n; ++i) mixed[i] = work[i].mixed;
    p.chain.pi = mhmm::m_step_pi(mixed);
    mhmm::GammaUpdate gu = mhmm::m_step_gamma(mixed);
    p.chain.gamma = std::move(gu.gamma);
    for (Index k : gu.degenerate_rows)
      rep.warnings.push_back("iteration " + std::to_string(iter) + ": transition row " +
                             std::to_string(k) + " had no expected visits and was set uniform");

    std::vector<WeightedEffects> subjects(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = subjects[i];
      s.data = &data[i];
      s.points = points;
      s.weights.assign(work[i].w.data(), work[i].w.data() + J);
      for (const auto& z : work[i].zetas) s.zetas.push_back(&z);
    }
    p.emission = p.emission->fit_weighted(subjects);

    if (config.update_sigma) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (Index j = 0; j < J; ++j)
          acc += work[i].w(j) * points[static_cast<std::size_t>(j)].squaredNorm();
      tau2 = std::max(1e-12, acc / static_cast<double>(static_cast<Index>(n) * d));
      p.sigma = tau2 * MatrixXd::Identity(d, d);
    }
    if (converged) {
      rep.converged = true;
      break;
    }
    prev = loglik;
  }
  if (!rep.converged)
    rep.warnings.push_back("reached max_iter = " + std::to_string(config.max_iter) +
                           " without meeting the log-likelihood tolerance");
  rep.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace

PosteriorWeights posterior_weights(const mhmm::MhmmParams& params, const Dataset& data,
                                   const NodeSet& nodes, unsigned threads) {
  data.validate();
  params.validate();
  if (nodes.nodes.cols() != params.effect_dim() || nodes.size() < 1 ||
      nodes.weights.size() != nodes.size())
    throw DimensionError("posterior_weights: node set does not match the effect dimension");
  const std::size_t n = data.size();
  const Index J = nodes.size();
  const VectorXd lv = log_prior_weights(nodes);
  PosteriorWeights out;
  out.w_hat.resize(static_cast<Index>(n), J);
  out.log_lik.resize(static_cast<Index>(n));
  parallel_for(n, resolve_threads(threads), [&](std::size_t i) {
    VectorXd row(J);
    for (Index j = 0; j < J; ++j) {
      const MatrixXd le =
          params.emission->log_emission_matrix(nodes.nodes.row(j).transpose(), data[i]);
      row(j) = lv(j) + hmm::conditional_log_marginal(hmm::forward_pass(le, params.chain));
    }
    out.log_lik(static_cast<Index>(i)) = normalize_row(row, i);
    out.w_hat.row(static_cast<Index>(i)) = row.transpose();
  });
  return out;
}

mhmm::FitReport fit_qem(const Dataset& data, const mhmm::MhmmParams& init, int j_per_dim,
                        const mhmm::AvemConfig& config) {
  const int d = static_cast<int>(init.effect_dim());
  return fit_nodes(data, init, config,
                   [&](int, double tau2) { return gh_tensor_nodes(j_per_dim, d, tau2); });
}

mhmm::FitReport fit_mcem(const Dataset& data, const mhmm::MhmmParams& init, int m,
                         const mhmm::AvemConfig& config) {
  const int d = static_cast<int>(init.effect_dim());
  return fit_nodes(data, init, config, [&](int iter, double tau2) {
    return mc_nodes(m, d, tau2, derive_seed(config.seed, static_cast<std::uint64_t>(iter)));
  });
}

}  // namespace avem::exact
