#include "avem/oracles.hpp"

#include "avem/emission.hpp"
#include "avem/error.hpp"
#include "avem/mhmm.hpp"

#include <chrono>
#include <cmath>
#include <memory>

namespace avem::oracle {

hmm::StatePosterior enumerate_paths(const MatrixXd& log_e, const hmm::ChainParams& chain) {
  const Index T = log_e.rows();
  const Index K = log_e.cols();
  double count = std::pow(static_cast<double>(K), static_cast<double>(T));
  if (T < 1 || count > 1e6) throw DimensionError("enumerate_paths: K^T must be in [1, 1e6]");
  const auto n_paths = static_cast<Index>(count);
  std::vector<double> logp(static_cast<std::size_t>(n_paths));
  std::vector<Index> path(static_cast<std::size_t>(T));
  auto decode = [&](Index code) {
    for (Index t = T - 1; t >= 0; --t) {
      path[static_cast<std::size_t>(t)] = code % K;
      code /= K;
    }
  };
  for (Index c = 0; c < n_paths; ++c) {
    decode(c);
    double lp = std::log(chain.pi(path[0])) + log_e(0, path[0]);
    for (Index t = 1; t < T; ++t) {
      const Index a = path[static_cast<std::size_t>(t - 1)];
      const Index b = path[static_cast<std::size_t>(t)];
      lp += std::log(chain.gamma(a, b)) + log_e(t, b);
    }
    logp[static_cast<std::size_t>(c)] = lp;
  }
  const double lse = log_sum_exp(std::span<const double>(logp));
  hmm::StatePosterior post;
  post.log_marginal = lse;
  post.zeta = MatrixXd::Zero(T, K);
  post.xi.assign(static_cast<std::size_t>(T - 1), MatrixXd::Zero(K, K));
  for (Index c = 0; c < n_paths; ++c) {
    decode(c);
    const double w = std::exp(logp[static_cast<std::size_t>(c)] - lse);
    for (Index t = 0; t < T; ++t) post.zeta(t, path[static_cast<std::size_t>(t)]) += w;
    for (Index t = 0; t + 1 < T; ++t)
      post.xi[static_cast<std::size_t>(t)](path[static_cast<std::size_t>(t)],
                                           path[static_cast<std::size_t>(t + 1)]) += w;
  }
  return post;
}

GridMoments grid_moments(const std::function<double(double)>& log_density, double lo, double hi,
                         int points) {
  if (points < 3 || points % 2 == 0) throw DimensionError("grid_moments: points must be odd >= 3");
  const double h = (hi - lo) / (points - 1);
  std::vector<double> lv(static_cast<std::size_t>(points));
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    lv[static_cast<std::size_t>(i)] = log_density(lo + i * h);
    mx = std::max(mx, lv[static_cast<std::size_t>(i)]);
  }
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < points; ++i) {
    const double x = lo + i * h;
    const double c = (i == 0 || i == points - 1) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double w = c * std::exp(lv[static_cast<std::size_t>(i)] - mx);
    z += w;
    m1 += w * x;
  }
  const double mean = m1 / z;
  for (int i = 0; i < points; ++i) {
    const double x = lo + i * h;
    const double c = (i == 0 || i == points - 1) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    m2 += c * std::exp(lv[static_cast<std::size_t>(i)] - mx) * (x - mean) * (x - mean);
  }
  return {mean, m2 / z, mx + std::log(z * h / 3.0)};
}

hmm::ChainParams random_chain(Rng& rng, Index K) {
  hmm::ChainParams c;
  c.pi.resize(K);
  c.gamma.resize(K, K);
  for (Index k = 0; k < K; ++k) c.pi(k) = 0.05 + NormalSampler::uniform(rng);
  c.pi /= c.pi.sum();
  for (Index a = 0; a < K; ++a) {
    for (Index b = 0; b < K; ++b) c.gamma(a, b) = 0.05 + NormalSampler::uniform(rng);
    c.gamma.row(a) /= c.gamma.row(a).sum();
  }
  return c;
}

kalman::LgssmSpec random_lgssm(Rng& rng, Index q, Index p) {
  NormalSampler normal;
  kalman::LgssmSpec s;
  s.G.resize(q, q);
  s.H.resize(p, q);
  for (Index i = 0; i < q; ++i)
    for (Index j = 0; j < q; ++j) s.G(i, j) = 0.4 * normal(rng);
  for (Index i = 0; i < p; ++i)
    for (Index j = 0; j < q; ++j) s.H(i, j) = normal(rng);
  s.r.resize(p);
  for (Index i = 0; i < p; ++i) s.r(i) = 0.2 + NormalSampler::uniform(rng);
  s.m0.resize(q);
  for (Index i = 0; i < q; ++i) s.m0(i) = normal(rng);
  MatrixXd a(q, q);
  for (Index i = 0; i < q; ++i)
    for (Index j = 0; j < q; ++j) a(i, j) = normal(rng);
  s.P0 = a * a.transpose() + 0.5 * MatrixXd::Identity(q, q);
  return s;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

}  // namespace

SuiteReport validate_hmm(int instances, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport rep{"oracle-hmm", instances, 0.0, 1e-10, 0.0};
  Rng rng(derive_seed(seed, 1));
  NormalSampler normal;
  for (int it = 0; it < instances; ++it) {
    const Index K = 1 + static_cast<Index>(rng() % 3);
    const Index T = 1 + static_cast<Index>(rng() % 6);
    const hmm::ChainParams chain = random_chain(rng, K);
    MatrixXd le(T, K);
    for (Index t = 0; t < T; ++t)
      for (Index k = 0; k < K; ++k) le(t, k) = 2.0 * normal(rng);
    const hmm::StatePosterior fb = hmm::forward_backward(le, chain);
    const hmm::StatePosterior ex = enumerate_paths(le, chain);
    double dev = (fb.zeta - ex.zeta).cwiseAbs().maxCoeff();
    for (std::size_t t = 0; t < ex.xi.size(); ++t)
      dev = std::max(dev, (fb.xi[t] - ex.xi[t]).cwiseAbs().maxCoeff());
    dev = std::max(dev, std::abs(fb.log_marginal - ex.log_marginal));
    rep.max_deviation = std::max(rep.max_deviation, dev);
  }
  rep.seconds = seconds_since(start);
  return rep;
}

SuiteReport validate_kalman(int instances, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport rep{"oracle-kalman", instances, 0.0, 1e-8, 0.0};
  Rng rng(derive_seed(seed, 2));
  NormalSampler normal;
  const Index q = 2, p = 3, T = 5;
  for (int it = 0; it < instances; ++it) {
    const kalman::LgssmSpec spec = random_lgssm(rng, q, p);
    MatrixXd data(T, p);
    for (Index t = 0; t < T; ++t)
      for (Index j = 0; j < p; ++j) data(t, j) = normal(rng);
    double ll = 0.0;
    const kalman::SmootherMoments sm = kalman::smooth(spec, data, &ll);
    const kalman::JointPosterior jp = kalman::dense_joint_oracle(spec, data);
    double dev = std::abs(ll - jp.log_likelihood);
    for (Index t = 0; t < T; ++t) {
      const auto ts = static_cast<std::size_t>(t);
      dev = std::max(dev, (sm.m_hat[ts] - jp.mean_at(t, q)).cwiseAbs().maxCoeff());
      dev = std::max(dev, (sm.P_hat[ts] - jp.cov_block(t, t, q)).cwiseAbs().maxCoeff());
      if (t + 1 < T)
        dev = std::max(dev, (sm.P_lag[ts] - jp.cov_block(t + 1, t, q)).cwiseAbs().maxCoeff());
    }
    rep.max_deviation = std::max(rep.max_deviation, dev);
  }
  rep.seconds = seconds_since(start);
  return rep;
}

SuiteReport validate_gaussian_estep(int instances, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport rep{"gaussian-estep", instances, 0.0, 1e-6, 0.0};
  Rng rng(derive_seed(seed, 3));
  NormalSampler normal;
  for (int it = 0; it < instances; ++it) {
    const Index K = 2, T = 8;
    mhmm::MhmmParams params;
    params.chain = random_chain(rng, K);
    MatrixXd mu(K, 1);
    VectorXd s2(K);
    for (Index k = 0; k < K; ++k) {
      mu(k, 0) = 2.0 * normal(rng);
      s2(k) = 0.5 + 1.5 * NormalSampler::uniform(rng);
    }
    auto em = std::make_shared<GaussianEmission>(mu, s2);
    params.emission = em;
    const double tau2 = 0.5 + 1.5 * NormalSampler::uniform(rng);
    params.sigma = MatrixXd::Constant(1, 1, tau2);
    MatrixXd seq(T, 1);
    for (Index t = 0; t < T; ++t) seq(t, 0) = 2.0 * normal(rng);
    VectorXd f0(1);
    f0(0) = normal(rng);
    const hmm::StatePosterior post = mhmm::e_step_local(params, seq, f0);
    const mhmm::QFactor cf = mhmm::update_q_closed_form(params, seq, post);
    auto log_tilted = [&](double f) {
      double v = -0.5 * f * f / tau2;
      for (Index t = 0; t < T; ++t)
        for (Index k = 0; k < K; ++k)
          v += post.zeta(t, k) *
               (-0.5 * std::log(2.0 * M_PI * s2(k)) - std::pow(seq(t, 0) - mu(k, 0) - f, 2) / (2.0 * s2(k)));
      return v;
    };
    const GridMoments gm = grid_moments(log_tilted, -20.0, 20.0, 40001);
    double dev = std::max(std::abs(gm.mean - cf.nu(0)), std::abs(gm.variance - cf.omega(0, 0)));
    const mhmm::QFactor lp = mhmm::update_q_laplace(params, seq, post, f0);
    dev = std::max(dev, std::abs(lp.nu(0) - cf.nu(0)));
    dev = std::max(dev, std::abs(lp.omega(0, 0) - cf.omega(0, 0)));
    rep.max_deviation = std::max(rep.max_deviation, dev);
  }
  rep.seconds = seconds_since(start);
  return rep;
}

std::vector<std::string> suite_names() { return {"oracle-hmm", "oracle-kalman", "gaussian-estep"}; }

SuiteReport run_suite(const std::string& name, std::uint64_t seed) {
  if (name == "oracle-hmm") return validate_hmm(100, seed);
  if (name == "oracle-kalman") return validate_kalman(50, seed);
  if (name == "gaussian-estep") return validate_gaussian_estep(50, seed);
  throw ConfigError("unknown validation suite '" + name + "'", "suite");
}

}  // namespace avem::oracle
