#include "avem/error.hpp"
#include "avem/partial_anchor.hpp"
#include "avem/quadrature.hpp"
#include "avem/simlab.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace avem;
using namespace testing_support;

namespace {

pavem::PavemParams two_state_params(std::mt19937_64& rng, Index t0, double tau_b2, double noise = 1.0) {
  pavem::PavemParams p;
  MatrixXd mu(2, 1);
  mu << 1.5, -1.5;
  p.base.chain = random_chain(rng, 2);
  p.base.emission = std::make_shared<GaussianEmission>(mu, noise * (VectorXd(2) << 0.8, 1.2).finished());
  p.base.sigma = MatrixXd::Ones(1, 1);
  p.t0 = t0;
  p.tau_b2 = tau_b2;
  return p;
}

sim::Simulated localized_data(std::uint64_t seed, std::uint64_t rep) {
  sim::ScenarioSpec s;
  s.variant = sim::Variant::localized;
  s.n = 20;
  s.T = 40;
  s.seed = seed;
  return sim::generate(s, rep);
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST(LocalizedEmission, DesignSwitchesOffAfterCutoff) {
  pavem::LocalizedGaussianEmission em(MatrixXd::Zero(2, 1), VectorXd::Ones(2), 3, 1.0, 1.5);
  EXPECT_EQ(em.design(2), (MatrixXd(1, 2) << 1.0, 1.0).finished());
  EXPECT_EQ(em.design(3), (MatrixXd(1, 2) << 1.0, 0.0).finished());
  const VectorXd f = (VectorXd(2) << 0.4, -2.0).finished();
  EXPECT_DOUBLE_EQ(em.shift(0, f)(0), -1.6);
  EXPECT_DOUBLE_EQ(em.shift(5, f)(0), 0.4);
  MatrixXd d = MatrixXd::Zero(6, 1);
  EXPECT_NEAR(em.log_e(0, 1, f, d), -0.5 * std::log(2 * M_PI) - 0.5 * 1.6 * 1.6, 1e-14);
}

TEST(LocalizedEmission, MatchesLogEmissionHelper) {
  std::mt19937_64 rng(1);
  const auto p = two_state_params(rng, 4, 1.5);
  const MatrixXd seq = random_matrix(rng, 9, 1, 1.5);
  const MatrixXd le = pavem::localized_log_emissions(p, seq, 0.3, -0.7);
  const auto& g = dynamic_cast<const GaussianEmission&>(*p.base.emission);
  for (Index t = 0; t < 9; ++t)
    for (Index k = 0; k < 2; ++k) {
      const double m = g.mu()(k, 0) + 0.3 + (t < 4 ? -0.7 : 0.0);
      const double v = g.sigma2()(k);
      EXPECT_NEAR(le(t, k), -0.5 * std::log(2 * M_PI * v) - std::pow(seq(t, 0) - m, 2) / (2 * v), 1e-13);
    }
}

TEST(GridFactor, WeightsFollowNodeLikelihoods) {
  std::mt19937_64 rng(2);
  const auto p = two_state_params(rng, 5, 2.0);
  const MatrixXd seq = random_matrix(rng, 15, 1, 1.5);
  const int J = 7;
  const auto before = hmm::forward_pass_count();
  const auto grid = pavem::update_grid_factor(p, seq, 0.2, J);
  EXPECT_EQ(hmm::forward_pass_count() - before, static_cast<std::uint64_t>(J));
  const auto rule = gauss_hermite(J);
  VectorXd lw(J);
  for (int j = 0; j < J; ++j) {
    const double fb = std::sqrt(2.0) * rule.nodes(j);
    EXPECT_NEAR(grid.nodes(j), fb, 1e-14);
    const auto fp = hmm::forward_pass(pavem::localized_log_emissions(p, seq, 0.2, fb), p.base.chain);
    lw(j) = std::log(rule.weights(j)) + hmm::conditional_log_marginal(fp);
  }
  const VectorXd w = (lw.array() - lw.maxCoeff()).exp();
  EXPECT_LT((grid.weights - w / w.sum()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(grid.weights.sum(), 1.0, 1e-14);
}

TEST(GridFactor, SingleNodeIsPriorMean) {
  std::mt19937_64 rng(3);
  const auto p = two_state_params(rng, 5, 2.0);
  const auto grid = pavem::update_grid_factor(p, random_matrix(rng, 10, 1), 0.0, 1);
  ASSERT_EQ(grid.nodes.size(), 1);
  EXPECT_EQ(grid.nodes(0), 0.0);
  EXPECT_EQ(grid.weights(0), 1.0);
}

namespace {

double dense_fb_mean(const pavem::PavemParams& p, const MatrixXd& seq, double fa) {
  auto logf = [&](double fb) {
    const auto fp = hmm::forward_pass(pavem::localized_log_emissions(p, seq, fa, fb), p.base.chain);
    return -0.5 * fb * fb / p.tau_b2 + hmm::conditional_log_marginal(fp);
  };
  return simpson_moments(logf, -10.0, 10.0, 1000).mean;
}

}  // namespace

TEST(GridFactor, NineNodeMeanMatchesDirectIntegration) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 5; ++rep) {
    const auto p = two_state_params(rng, 3, 1.5, 4.0);
    const MatrixXd seq = random_matrix(rng, 20, 1, 1.5);
    EXPECT_NEAR(pavem::update_grid_factor(p, seq, -0.1, 9).mean(), dense_fb_mean(p, seq, -0.1), 1e-3);
  }
}

TEST(GridFactor, ConvergesToDirectIntegrationAsNodesGrow) {
  std::mt19937_64 rng(5);
  const auto p = two_state_params(rng, 6, 1.5);
  const MatrixXd seq = random_matrix(rng, 20, 1, 1.5);
  EXPECT_NEAR(pavem::update_grid_factor(p, seq, -0.1, 80).mean(), dense_fb_mean(p, seq, -0.1), 1e-6);
}

TEST(FitPavem, CountsJForwardPassesPerSubject) {
  const auto s = localized_data(5, 0);
  const auto base = mhmm::default_init_gaussian(s.data, 2);
  pavem::PavemConfig c;
  c.n_nodes = 5;
  c.avem.max_iter = 6;
  const auto before = hmm::forward_pass_count();
  const auto r = pavem::fit_pavem(s.data, pavem::PavemParams{base, 10, 1.0}, c);
  EXPECT_EQ(hmm::forward_pass_count() - before, static_cast<std::uint64_t>(20 * 5 * r.fit.n_iter));
  for (auto v : r.fit.forward_passes) EXPECT_EQ(v, 100u);
  ASSERT_EQ(r.grids.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_DOUBLE_EQ(r.fb_hat[i], r.grids[i].mean());
}

TEST(FitPavem, SingleNodeReproducesAnchoredFitBitwise) {
  for (std::uint64_t rep = 0; rep < 2; ++rep) {
    const auto s = localized_data(6, rep);
    const auto base = mhmm::default_init_gaussian(s.data, 2);
    mhmm::AvemConfig c;
    const auto a = mhmm::fit_mhmm(s.data, base, c);
    pavem::PavemConfig pc;
    pc.avem = c;
    pc.n_nodes = 1;
    const auto p = pavem::fit_pavem(s.data, pavem::PavemParams{base, 10, 1.0}, pc);
    EXPECT_TRUE(same_bits(a.elbo_trace, p.fit.elbo_trace));
    for (std::size_t i = 0; i < a.q_factors.size(); ++i) {
      EXPECT_EQ(a.q_factors[i].nu(0), p.fit.q_factors[i].nu(0));
      EXPECT_EQ(a.q_factors[i].omega(0, 0), p.fit.q_factors[i].omega(0, 0));
    }
    EXPECT_TRUE((a.params.chain.gamma.array() == p.fit.params.chain.gamma.array()).all());
    EXPECT_TRUE((a.params.emission->parameter_vector().array() ==
                 p.fit.params.emission->parameter_vector().array()).all());
  }
}

TEST(FitPavem, DeterministicAcrossThreads) {
  const auto s = localized_data(7, 0);
  const auto base = mhmm::default_init_gaussian(s.data, 2);
  pavem::PavemConfig c;
  c.avem.max_iter = 30;
  const auto a = pavem::fit_pavem(s.data, pavem::PavemParams{base, 10, 1.0}, c);
  c.avem.threads = 3;
  const auto b = pavem::fit_pavem(s.data, pavem::PavemParams{base, 10, 1.0}, c);
  EXPECT_TRUE(same_bits(a.fit.elbo_trace, b.fit.elbo_trace));
  EXPECT_TRUE(same_bits(a.fb_hat, b.fb_hat));
  EXPECT_EQ(a.tau_b2, b.tau_b2);
}

TEST(PavemParams, RejectsNegativeCutoff) {
  std::mt19937_64 rng(8);
  auto p = two_state_params(rng, -1, 1.0);
  EXPECT_THROW(p.validate(), std::exception);
}
