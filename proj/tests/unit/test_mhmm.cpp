#include "avem/error.hpp"
#include "avem/mhmm.hpp"
#include "avem/quadrature.hpp"
#include "avem/simlab.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace avem;
using namespace testing_support;

namespace {

// Emission table that ignores the random effect.
class TableEmission final : public EmissionModel {
 public:
  TableEmission(MatrixXd table, Index d) : table_(std::move(table)), d_(d) {}
  std::string name() const override { return "table"; }
  Index n_states() const override { return table_.cols(); }
  Index effect_dim() const override { return d_; }
  Index obs_dim() const override { return 1; }
  double log_e(Index k, Index t, const VectorXd&, const MatrixXd&) const override {
    return table_(t, k);
  }
  VectorXd grad_f(Index, Index, const VectorXd&, const MatrixXd&) const override {
    return VectorXd::Zero(d_);
  }
  MatrixXd hess_f(Index, Index, const VectorXd&, const MatrixXd&) const override {
    return MatrixXd::Zero(d_, d_);
  }
  std::unique_ptr<EmissionModel> fit_weighted(const std::vector<WeightedEffects>&) const override {
    return clone();
  }
  VectorXd parameter_vector() const override { return VectorXd::Zero(0); }
  std::unique_ptr<EmissionModel> clone() const override {
    return std::make_unique<TableEmission>(*this);
  }

 private:
  MatrixXd table_;
  Index d_;
};

mhmm::MhmmParams gaussian_params(const MatrixXd& mu, const VectorXd& s2, double tau2,
                                 std::mt19937_64* rng = nullptr) {
  mhmm::MhmmParams p;
  p.chain = rng ? random_chain(*rng, mu.rows()) : mhmm::sticky_chain(mu.rows(), 0.8);
  p.emission = std::make_shared<GaussianEmission>(mu, s2);
  p.sigma = tau2 * MatrixXd::Identity(mu.cols(), mu.cols());
  return p;
}

mhmm::MhmmParams bernoulli_params(double tau2) {
  mhmm::MhmmParams p;
  p.chain = mhmm::sticky_chain(2, 0.9);
  p.emission = std::make_shared<BernoulliEmission>((VectorXd(2) << -1.5, 1.5).finished());
  p.sigma = MatrixXd::Constant(1, 1, tau2);
  return p;
}

MatrixXd binary_sequence(std::mt19937_64& rng, Index T, double p1) {
  std::bernoulli_distribution b(p1);
  MatrixXd y(T, 1);
  for (Index t = 0; t < T; ++t) y(t, 0) = b(rng) ? 1.0 : 0.0;
  return y;
}

double mu_value(const mhmm::MhmmParams& p, Index k) {
  return dynamic_cast<const LinearGaussianEmission&>(*p.emission).mu()(k, 0);
}

}  // namespace

// --- E-step ------------------------------------------------------------------

TEST(EStepLocal, AnchorIrrelevantWhenEmissionIgnoresEffect) {
  std::mt19937_64 rng(1);
  mhmm::MhmmParams p;
  p.chain = random_chain(rng, 2);
  p.emission = std::make_shared<TableEmission>(random_matrix(rng, 6, 2), 1);
  p.sigma = MatrixXd::Identity(1, 1);
  const MatrixXd seq = MatrixXd::Zero(6, 1);
  const auto a = mhmm::e_step_local(p, seq, VectorXd::Constant(1, -3.0));
  const auto b = mhmm::e_step_local(p, seq, VectorXd::Constant(1, 5.0));
  EXPECT_TRUE((a.zeta.array() == b.zeta.array()).all());
  EXPECT_EQ(a.log_marginal, b.log_marginal);
}

TEST(EStepLocal, SingleStateIsCertain) {
  std::mt19937_64 rng(2);
  const auto p = gaussian_params(MatrixXd::Zero(1, 1), VectorXd::Ones(1), 1.0);
  const auto post = mhmm::e_step_local(p, random_matrix(rng, 5, 1), VectorXd::Zero(1));
  EXPECT_TRUE((post.zeta.array() == 1.0).all());
}

TEST(EStepLocal, MatchesBruteForceConditionalPosterior) {
  std::mt19937_64 rng(3);
  MatrixXd mu(2, 1);
  mu << 1.0, -0.5;
  const VectorXd s2 = (VectorXd(2) << 0.6, 1.3).finished();
  const auto p = gaussian_params(mu, s2, 1.0, &rng);
  const MatrixXd seq = random_matrix(rng, 4, 1, 1.5);
  const double f0 = 0.37;
  MatrixXd le(4, 2);
  for (Index t = 0; t < 4; ++t)
    for (Index k = 0; k < 2; ++k)
      le(t, k) = -0.5 * std::log(2 * M_PI * s2(k)) - std::pow(seq(t, 0) - mu(k, 0) - f0, 2) / (2 * s2(k));
  const BruteForce bf = brute_force(le, p.chain);
  const auto post = mhmm::e_step_local(p, seq, VectorXd::Constant(1, f0));
  EXPECT_LT((post.zeta - bf.zeta).cwiseAbs().maxCoeff(), 1e-10);
  for (std::size_t t = 0; t < bf.xi.size(); ++t)
    EXPECT_LT((post.xi[t] - bf.xi[t]).cwiseAbs().maxCoeff(), 1e-10);
}

// --- q updates ---------------------------------------------------------------

TEST(ClosedFormQ, PrecisionIsForcedByOccupancy) {
  std::mt19937_64 rng(4);
  MatrixXd mu(2, 1);
  mu << 1.0, -1.0;
  const auto p = gaussian_params(mu, VectorXd::Ones(2), 1.0);
  const MatrixXd seq = random_matrix(rng, 4, 1);
  const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(1));
  EXPECT_NEAR(mhmm::update_q_closed_form(p, seq, post).omega(0, 0), 0.2, 1e-15);
}

TEST(ClosedFormQ, ScalarPosteriorMean) {
  const auto p = gaussian_params(MatrixXd::Zero(1, 1), VectorXd::Ones(1), 1.0);
  const MatrixXd seq = MatrixXd::Ones(4, 1);
  const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(1));
  const auto q = mhmm::update_q_closed_form(p, seq, post);
  EXPECT_NEAR(q.nu(0), 0.8, 1e-15);
  EXPECT_NEAR(q.omega(0, 0), 0.2, 1e-15);
}

TEST(ClosedFormQ, MatchesGridIntegrationOfTiltedDensity) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    const MatrixXd mu = random_matrix(rng, 2, 1, 1.5);
    const VectorXd s2 = (VectorXd(2) << 0.5, 1.7).finished();
    const double tau2 = 0.8;
    const auto p = gaussian_params(mu, s2, tau2, &rng);
    const MatrixXd seq = random_matrix(rng, 10, 1, 2.0);
    const auto post = mhmm::e_step_local(p, seq, VectorXd::Constant(1, 0.3));
    const auto q = mhmm::update_q_closed_form(p, seq, post);
    auto logf = [&](double f) {
      double v = -0.5 * f * f / tau2;
      for (Index t = 0; t < 10; ++t)
        for (Index k = 0; k < 2; ++k)
          v -= post.zeta(t, k) * std::pow(seq(t, 0) - mu(k, 0) - f, 2) / (2 * s2(k));
      return v;
    };
    const auto m = simpson_moments(logf, -15.0, 15.0, 30000);
    EXPECT_NEAR(q.nu(0), m.mean, 1e-6);
    EXPECT_NEAR(q.omega(0, 0), m.var, 1e-6);
  }
}

TEST(ClosedFormQ, RejectsNonGaussianEmission) {
  const auto p = bernoulli_params(1.0);
  const MatrixXd seq = MatrixXd::Ones(3, 1);
  const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(1));
  EXPECT_THROW(mhmm::update_q_closed_form(p, seq, post), DimensionError);
}

TEST(LaplaceQ, EqualsClosedFormForGaussianEmission) {
  std::mt19937_64 rng(6);
  MatrixXd mu(3, 2);
  mu << 1.5, 1.5, 0.0, 0.0, -1.5, -1.5;
  const auto p = gaussian_params(mu, (VectorXd(3) << 0.5, 1.0, 2.0).finished(), 0.7, &rng);
  const MatrixXd seq = random_matrix(rng, 12, 2, 1.5);
  const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(2));
  const auto cf = mhmm::update_q_closed_form(p, seq, post);
  const auto lp = mhmm::update_q_laplace(p, seq, post, VectorXd::Constant(2, 3.0));
  EXPECT_LT((cf.nu - lp.nu).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((cf.omega - lp.omega).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(LaplaceQ, NoDataReturnsPrior) {
  const auto p = bernoulli_params(0.6);
  const MatrixXd seq(0, 1);
  hmm::StatePosterior post;
  post.zeta = MatrixXd::Zero(0, 2);
  const auto q = mhmm::update_q_laplace(p, seq, post, VectorXd::Constant(1, 0.5));
  EXPECT_NEAR(q.nu(0), 0.0, 1e-12);
  EXPECT_NEAR(q.omega(0, 0), 0.6, 1e-12);
}

TEST(LaplaceQ, BernoulliModeAndCurvatureMatchTiltedDensity) {
  std::mt19937_64 rng(7);
  const auto p = bernoulli_params(1.0);
  const auto& em = dynamic_cast<const BernoulliEmission&>(*p.emission);
  for (int rep = 0; rep < 5; ++rep) {
    const MatrixXd seq = binary_sequence(rng, 50, 0.6);
    const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(1));
    const auto q = mhmm::update_q_laplace(p, seq, post, VectorXd::Zero(1));
    auto logf = [&](double f) {
      double v = -0.5 * f * f;
      for (Index t = 0; t < 50; ++t)
        for (Index k = 0; k < 2; ++k)
          v += post.zeta(t, k) * bernoulli_log_density(seq(t, 0), em.beta()(k) + f);
      return v;
    };
    const double f = q.nu(0), h = 1e-4;
    EXPECT_NEAR((logf(f + h) - logf(f - h)) / (2 * h), 0.0, 1e-6);
    const double curv = (logf(f + h) - 2 * logf(f) + logf(f - h)) / (h * h);
    EXPECT_NEAR(q.omega(0, 0), -1.0 / curv, 1e-4 * q.omega(0, 0));
    // Against the exact tilted moments the Gaussian approximation is close but
    // not exact: variance within 2%, mean within 10% of a posterior sd.
    const auto m = simpson_moments(logf, -10.0, 10.0, 20000);
    EXPECT_LT(std::abs(q.omega(0, 0) - m.var), 0.02 * m.var);
    EXPECT_LT(std::abs(q.nu(0) - m.mean), 0.1 * std::sqrt(m.var));
  }
}

TEST(QuadratureQ, AgreesWithClosedFormForGaussian) {
  std::mt19937_64 rng(8);
  MatrixXd mu(2, 1);
  mu << 1.0, -1.0;
  const auto p = gaussian_params(mu, (VectorXd(2) << 0.7, 1.2).finished(), 0.5, &rng);
  const MatrixXd seq = random_matrix(rng, 15, 1, 1.5);
  const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(1));
  const auto cf = mhmm::update_q_closed_form(p, seq, post);
  const auto qq = mhmm::update_q_quadrature(p, seq, post, {VectorXd::Zero(1), p.sigma}, 9);
  EXPECT_NEAR(qq.nu(0), cf.nu(0), 1e-6);
  EXPECT_NEAR(qq.omega(0, 0), cf.omega(0, 0), 1e-6);
}

TEST(QuadratureQ, EffectFreeEmissionReturnsPrior) {
  std::mt19937_64 rng(9);
  mhmm::MhmmParams p;
  p.chain = random_chain(rng, 2);
  p.emission = std::make_shared<TableEmission>(random_matrix(rng, 5, 2), 2);
  p.sigma = (MatrixXd(2, 2) << 1.0, 0.3, 0.3, 0.5).finished();
  const MatrixXd seq = MatrixXd::Zero(5, 1);
  const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(2));
  const auto q = mhmm::update_q_quadrature(p, seq, post, {VectorXd::Ones(2), MatrixXd::Identity(2, 2)}, 5);
  EXPECT_LT(q.nu.cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((q.omega - p.sigma).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(QuadratureQ, BeatsLaplaceOnItsObjective) {
  std::mt19937_64 rng(10);
  const auto p = bernoulli_params(1.0);
  for (int rep = 0; rep < 5; ++rep) {
    const MatrixXd seq = binary_sequence(rng, 100, 0.55);
    const auto post = mhmm::e_step_local(p, seq, VectorXd::Zero(1));
    const auto lp = mhmm::update_q_laplace(p, seq, post, VectorXd::Zero(1));
    const auto qq = mhmm::update_q_quadrature(p, seq, post, lp, 9);
    EXPECT_GE(mhmm::q_objective(p, seq, post, qq, 9), mhmm::q_objective(p, seq, post, lp, 9) - 1e-6);
  }
}

// --- M-step ------------------------------------------------------------------

namespace {

hmm::StatePosterior posterior_from_zeta(const MatrixXd& zeta) {
  hmm::StatePosterior p;
  p.zeta = zeta;
  for (Index t = 0; t + 1 < zeta.rows(); ++t)
    p.xi.push_back(zeta.row(t).transpose() * zeta.row(t + 1));
  return p;
}

std::vector<hmm::StatePosterior> random_posteriors(std::mt19937_64& rng, Index n, Index T, Index K) {
  std::vector<hmm::StatePosterior> out;
  for (Index i = 0; i < n; ++i) {
    const auto chain = random_chain(rng, K);
    out.push_back(hmm::forward_backward(random_matrix(rng, T, K, 1.5), chain));
  }
  return out;
}

}  // namespace

TEST(MStepPi, TwoOneHotSubjects) {
  std::vector<hmm::StatePosterior> posts{posterior_from_zeta((MatrixXd(1, 2) << 1, 0).finished()),
                                         posterior_from_zeta((MatrixXd(1, 2) << 0, 1).finished())};
  const VectorXd pi = mhmm::m_step_pi(posts);
  EXPECT_DOUBLE_EQ(pi(0), 0.5);
  EXPECT_DOUBLE_EQ(pi(1), 0.5);
}

TEST(MStepPi, SingleSubjectCopiesFirstRow) {
  std::mt19937_64 rng(11);
  const auto posts = random_posteriors(rng, 1, 4, 3);
  EXPECT_LT((mhmm::m_step_pi(posts) - posts[0].zeta.row(0).transpose()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MStepPi, MaximizesOverSimplexGrid) {
  std::mt19937_64 rng(12);
  const auto posts = random_posteriors(rng, 6, 3, 2);
  VectorXd s = VectorXd::Zero(2);
  for (const auto& p : posts) s += p.zeta.row(0).transpose();
  auto obj = [&](double a) { return s(0) * std::log(a) + s(1) * std::log(1.0 - a); };
  double best = 0.0, best_a = 0.0;
  for (int i = 1; i < 100000; ++i) {
    const double a = i / 100000.0;
    if (i == 1 || obj(a) > best) {
      best = obj(a);
      best_a = a;
    }
  }
  const VectorXd pi = mhmm::m_step_pi(posts);
  EXPECT_NEAR(pi(0), best_a, 1e-5);
  EXPECT_GE(obj(pi(0)), best - 1e-12);
}

TEST(MStepGamma, UniformPairwiseGivesUniformRows) {
  const MatrixXd z = MatrixXd::Constant(5, 3, 1.0 / 3);
  const auto g = mhmm::m_step_gamma(std::vector<hmm::StatePosterior>{posterior_from_zeta(z)});
  EXPECT_LT((g.gamma.array() - 1.0 / 3).abs().maxCoeff(), 1e-15);
  EXPECT_TRUE(g.degenerate_rows.empty());
}

TEST(MStepGamma, UnvisitedStateFallsBackToUniform) {
  MatrixXd z(4, 2);
  z << 1, 0, 1, 0, 1, 0, 1, 0;
  const auto g = mhmm::m_step_gamma(std::vector<hmm::StatePosterior>{posterior_from_zeta(z)});
  ASSERT_EQ(g.degenerate_rows.size(), 1u);
  EXPECT_EQ(g.degenerate_rows[0], 1);
  EXPECT_DOUBLE_EQ(g.gamma(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(g.gamma(1, 1), 0.5);
  EXPECT_DOUBLE_EQ(g.gamma(0, 0), 1.0);
}

TEST(MStepGamma, MatchesConstrainedMaximization) {
  std::mt19937_64 rng(13);
  const auto posts = random_posteriors(rng, 4, 8, 2);
  MatrixXd s = MatrixXd::Zero(2, 2);
  for (const auto& p : posts)
    for (const auto& x : p.xi) s += x;
  const MatrixXd g = mhmm::m_step_gamma(posts).gamma;
  for (Index k = 0; k < 2; ++k) {
    // Ternary search of the concave row objective over the simplex.
    auto obj = [&](double a) { return s(k, 0) * std::log(a) + s(k, 1) * std::log(1.0 - a); };
    double lo = 1e-12, hi = 1.0 - 1e-12;
    for (int it = 0; it < 200; ++it) {
      const double m1 = lo + (hi - lo) / 3, m2 = hi - (hi - lo) / 3;
      (obj(m1) < obj(m2) ? lo : hi) = (obj(m1) < obj(m2) ? m1 : m2);
    }
    EXPECT_NEAR(g(k, 0), 0.5 * (lo + hi), 1e-6);
  }
}

TEST(MStepSigma, IdentityFromSingleFactor) {
  std::vector<mhmm::QFactor> q{{VectorXd::Zero(2), MatrixXd::Identity(2, 2)}};
  EXPECT_LT((mhmm::m_step_sigma(q) - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MStepSigma, SampleSecondMoment) {
  const VectorXd a = (VectorXd(2) << 0.7, -1.2).finished();
  std::vector<mhmm::QFactor> q{{a, 1e-8 * MatrixXd::Identity(2, 2)},
                               {-a, 1e-8 * MatrixXd::Identity(2, 2)}};
  EXPECT_LT((mhmm::m_step_sigma(q) - a * a.transpose()).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(MStepSigma, StationaryPointOfObjective) {
  std::mt19937_64 rng(14);
  std::vector<mhmm::QFactor> q;
  for (int i = 0; i < 7; ++i) {
    const MatrixXd a = random_matrix(rng, 2, 2, 0.5);
    q.push_back({random_matrix(rng, 2, 1), a * a.transpose() + 0.1 * MatrixXd::Identity(2, 2)});
  }
  const MatrixXd sig = mhmm::m_step_sigma(q);
  // Objective in the precision P = Sigma^{-1}: (n/2) log|P| - (1/2) sum tr(P S_i).
  auto obj = [&](const VectorXd& v) {
    MatrixXd P(2, 2);
    P << v(0), v(1), v(1), v(2);
    double o = 0.5 * 7 * std::log(P.determinant());
    for (const auto& f : q) o -= 0.5 * (P * (f.omega + f.nu * f.nu.transpose())).trace();
    return o;
  };
  const MatrixXd P = sig.inverse();
  const VectorXd x = (VectorXd(3) << P(0, 0), P(0, 1), P(1, 1)).finished();
  EXPECT_LT(fd_gradient(obj, x, 1e-6).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(MStepThetaE, SingleStateGrandMean) {
  std::mt19937_64 rng(15);
  Dataset d;
  for (int i = 0; i < 3; ++i) d.sequences.push_back(random_matrix(rng, 5, 1, 2.0));
  const auto p = gaussian_params(MatrixXd::Zero(1, 1), VectorXd::Ones(1), 1.0);
  std::vector<hmm::StatePosterior> posts;
  std::vector<mhmm::QFactor> q;
  double sum = 0.0;
  for (const auto& s : d.sequences) {
    posts.push_back(posterior_from_zeta(MatrixXd::Ones(5, 1)));
    q.push_back({VectorXd::Zero(1), MatrixXd::Constant(1, 1, 0.3)});
    sum += s.sum();
  }
  const double mean = sum / 15.0;
  double ss = 0.0;
  for (const auto& s : d.sequences) ss += (s.array() - mean).square().sum() + 5 * 0.3;
  const auto em = mhmm::m_step_theta_e(*p.emission, d, posts, q, 9);
  const auto& g = dynamic_cast<const GaussianEmission&>(*em);
  EXPECT_NEAR(g.mu()(0, 0), mean, 1e-12);
  EXPECT_NEAR(g.sigma2()(0), ss / 15.0, 1e-12);
}

TEST(MStepThetaE, OneHotStatesGivePerStateMeansOfResiduals) {
  std::mt19937_64 rng(16);
  Dataset d;
  std::vector<hmm::StatePosterior> posts;
  std::vector<mhmm::QFactor> q;
  VectorXd sums = VectorXd::Zero(2), counts = VectorXd::Zero(2);
  for (int i = 0; i < 4; ++i) {
    d.sequences.push_back(random_matrix(rng, 6, 1, 2.0));
    MatrixXd z = MatrixXd::Zero(6, 2);
    const double nu = 0.25 * i - 0.3;
    for (Index t = 0; t < 6; ++t) {
      const Index k = (t + i) % 2;
      z(t, k) = 1.0;
      sums(k) += d.sequences.back()(t, 0) - nu;
      counts(k) += 1.0;
    }
    posts.push_back(posterior_from_zeta(z));
    q.push_back({VectorXd::Constant(1, nu), MatrixXd::Constant(1, 1, 1e-12)});
  }
  const auto p = gaussian_params(MatrixXd::Zero(2, 1), VectorXd::Ones(2), 1.0);
  const auto em = mhmm::m_step_theta_e(*p.emission, d, posts, q, 9);
  const auto& g = dynamic_cast<const GaussianEmission&>(*em);
  EXPECT_NEAR(g.mu()(0, 0), sums(0) / counts(0), 1e-12);
  EXPECT_NEAR(g.mu()(1, 0), sums(1) / counts(1), 1e-12);
}

TEST(MStepThetaE, BernoulliGradientVanishes) {
  std::mt19937_64 rng(17);
  const auto p = bernoulli_params(1.0);
  Dataset d;
  std::vector<hmm::StatePosterior> posts;
  std::vector<mhmm::QFactor> q;
  for (int i = 0; i < 6; ++i) {
    d.sequences.push_back(binary_sequence(rng, 40, 0.3 + 0.08 * i));
    posts.push_back(mhmm::e_step_local(p, d.sequences.back(), VectorXd::Zero(1)));
    q.push_back({VectorXd::Constant(1, 0.1 * i - 0.2), MatrixXd::Constant(1, 1, 0.2)});
  }
  const auto em = mhmm::m_step_theta_e(*p.emission, d, posts, q, 9);
  const VectorXd beta = dynamic_cast<const BernoulliEmission&>(*em).beta();
  const auto rule = gauss_hermite(9);
  auto obj = [&](const VectorXd& b) {
    double o = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i)
      for (Index j = 0; j < rule.nodes.size(); ++j) {
        const double f = q[i].nu(0) + std::sqrt(q[i].omega(0, 0)) * rule.nodes(j);
        for (Index t = 0; t < d[i].rows(); ++t)
          for (Index k = 0; k < 2; ++k)
            o += rule.weights(j) * posts[i].zeta(t, k) * bernoulli_log_density(d[i](t, 0), b(k) + f);
      }
    return o;
  };
  EXPECT_LT(fd_gradient(obj, beta, 1e-5).cwiseAbs().maxCoeff(), 1e-6);
}

// --- ELBO --------------------------------------------------------------------

TEST(AnchoredElbo, PriorFactorsGiveMarginalLikelihood) {
  std::mt19937_64 rng(18);
  mhmm::MhmmParams p;
  p.chain = random_chain(rng, 3);
  const MatrixXd table = random_matrix(rng, 5, 3);
  p.emission = std::make_shared<TableEmission>(table, 1);
  p.sigma = MatrixXd::Constant(1, 1, 0.7);
  Dataset d;
  d.sequences.assign(3, MatrixXd::Zero(5, 1));
  std::vector<mhmm::QFactor> q(3, {VectorXd::Zero(1), p.sigma});
  std::vector<VectorXd> anchors(3, VectorXd::Zero(1));
  const double lm = hmm::conditional_log_marginal(hmm::forward_pass(table, p.chain));
  EXPECT_NEAR(mhmm::anchored_elbo(p, d, q, anchors, 9), 3 * lm, 1e-10);
}

TEST(AnchoredElbo, KlVanishesForIdenticalGaussians) {
  const MatrixXd s = (MatrixXd(2, 2) << 1.0, 0.2, 0.2, 0.6).finished();
  EXPECT_NEAR(gaussian_kl(VectorXd::Zero(2), s, VectorXd::Zero(2), s), 0.0, 1e-15);
}

TEST(AnchoredElbo, MatchesDirectIntegralOfDefinition) {
  std::mt19937_64 rng(19);
  MatrixXd mu(2, 1);
  mu << 0.8, -0.6;
  const VectorXd s2 = (VectorXd(2) << 0.7, 1.1).finished();
  const double tau2 = 0.9;
  const auto p = gaussian_params(mu, s2, tau2, &rng);
  const MatrixXd seq = random_matrix(rng, 3, 1, 1.2);
  const double f0 = 0.25;
  const mhmm::QFactor q{VectorXd::Constant(1, 0.1), MatrixXd::Constant(1, 1, 0.3)};

  // Anchored path law by enumeration.
  MatrixXd le0(3, 2);
  for (Index t = 0; t < 3; ++t)
    for (Index k = 0; k < 2; ++k)
      le0(t, k) = -0.5 * std::log(2 * M_PI * s2(k)) - std::pow(seq(t, 0) - mu(k, 0) - f0, 2) / (2 * s2(k));
  const BruteForce bf = brute_force(le0, p.chain);
  auto integrand = [&](double f) {
    // log q(f) + log of E_{p0(U)}[log p(D, U, f) - log q(f) - log p0(U)] inside the q integral.
    const double lq = -0.5 * std::log(2 * M_PI * 0.3) - std::pow(f - 0.1, 2) / (2 * 0.3);
    double inner = 0.0;
    for (Index c = 0; c < 8; ++c) {
      const Index u[3] = {c % 2, (c / 2) % 2, (c / 4) % 2};
      double lp0 = std::log(p.chain.pi(u[0])) + le0(0, u[0]);
      double lj = std::log(p.chain.pi(u[0]));
      for (Index t = 1; t < 3; ++t) {
        lp0 += std::log(p.chain.gamma(u[t - 1], u[t])) + le0(t, u[t]);
        lj += std::log(p.chain.gamma(u[t - 1], u[t]));
      }
      lp0 -= bf.log_marginal;
      for (Index t = 0; t < 3; ++t)
        lj += -0.5 * std::log(2 * M_PI * s2(u[t])) - std::pow(seq(t, 0) - mu(u[t], 0) - f, 2) / (2 * s2(u[t]));
      lj += -0.5 * std::log(2 * M_PI * tau2) - f * f / (2 * tau2);
      inner += std::exp(lp0) * (lj - lq - lp0);
    }
    return std::exp(lq) * inner;
  };
  const int n = 40000;
  const double lo = -8.0, hi = 8.0, h = (hi - lo) / n;
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double c = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    acc += c * integrand(lo + i * h);
  }
  acc *= h / 3.0;
  Dataset d;
  d.sequences.push_back(seq);
  const std::vector<mhmm::QFactor> qs{q};
  const std::vector<VectorXd> anchors{VectorXd::Constant(1, f0)};
  EXPECT_NEAR(mhmm::anchored_elbo(p, d, qs, anchors, 9), acc, 1e-6);
}

// --- driver ------------------------------------------------------------------

namespace {

Dataset scenario_data(Index n, Index T, double tau2, std::uint64_t seed, Index K = 2, Index d = 1) {
  sim::ScenarioSpec s;
  s.n = n;
  s.T = T;
  s.tau2 = tau2;
  s.K = K;
  s.d = d;
  s.seed = seed;
  return sim::generate(s, 0).data;
}

}  // namespace

TEST(FitMhmm, SmallSigmaMatchesBaumWelch) {
  const Dataset d = scenario_data(10, 60, 0.0, 21);
  auto init = mhmm::default_init_gaussian(d, 2);
  init.sigma = MatrixXd::Constant(1, 1, 1e-10);
  mhmm::AvemConfig c;
  c.update_sigma = false;
  c.rel_tol = 1e-12;
  c.max_iter = 2000;
  const auto fit = mhmm::fit_mhmm(d, init, c);

  hmm::ChainParams chain = init.chain;
  const auto& g0 = dynamic_cast<const GaussianEmission&>(*init.emission);
  VectorXd mu = g0.mu().col(0), s2 = g0.sigma2();
  double prev = -INFINITY;
  for (int it = 0; it < 2000; ++it) {
    VectorXd pi = VectorXd::Zero(2), occ = VectorXd::Zero(2), occ_all = VectorXd::Zero(2), sy = VectorXd::Zero(2);
    MatrixXd trans = MatrixXd::Zero(2, 2);
    std::vector<MatrixXd> zetas;
    double ll = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      MatrixXd le(d[i].rows(), 2);
      for (Index t = 0; t < le.rows(); ++t)
        for (Index k = 0; k < 2; ++k)
          le(t, k) = -0.5 * std::log(2 * M_PI * s2(k)) - std::pow(d[i](t, 0) - mu(k), 2) / (2 * s2(k));
      const auto post = hmm::forward_backward(le, chain);
      ll += post.log_marginal;
      pi += post.zeta.row(0).transpose();
      for (const auto& x : post.xi) trans += x;
      for (Index t = 0; t < le.rows(); ++t) {
        if (t + 1 < le.rows()) occ += post.zeta.row(t).transpose();
        occ_all += post.zeta.row(t).transpose();
        sy += post.zeta.row(t).transpose() * d[i](t, 0);
      }
      zetas.push_back(post.zeta);
    }
    chain.pi = pi / static_cast<double>(d.size());
    for (Index k = 0; k < 2; ++k) chain.gamma.row(k) = trans.row(k) / occ(k);
    mu = sy.cwiseQuotient(occ_all);
    VectorXd ss = VectorXd::Zero(2);
    for (std::size_t i = 0; i < d.size(); ++i)
      for (Index t = 0; t < d[i].rows(); ++t)
        for (Index k = 0; k < 2; ++k) ss(k) += zetas[i](t, k) * std::pow(d[i](t, 0) - mu(k), 2);
    s2 = ss.cwiseQuotient(occ_all);
    if (std::abs(ll - prev) < 1e-13 * std::abs(ll)) break;
    prev = ll;
  }
  const auto& g = dynamic_cast<const GaussianEmission&>(*fit.params.emission);
  EXPECT_LT((g.mu().col(0) - mu).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT((g.sigma2() - s2).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT((fit.params.chain.gamma - chain.gamma).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(FitMhmm, SingleStateMatchesOneWayRandomEffectsMle) {
  std::mt19937_64 rng(22);
  const Index n = 12, T = 8;
  std::normal_distribution<double> nf(0.0, 1.2), ne(0.0, 0.8);
  Dataset d;
  for (Index i = 0; i < n; ++i) {
    const double f = nf(rng);
    MatrixXd s(T, 1);
    for (Index t = 0; t < T; ++t) s(t, 0) = 0.5 + f + ne(rng);
    d.sequences.push_back(s);
  }
  double grand = 0.0;
  VectorXd means(n);
  for (Index i = 0; i < n; ++i) {
    means(i) = d[i].mean();
    grand += means(i) / n;
  }
  double ssw = 0.0, ssb = 0.0;
  for (Index i = 0; i < n; ++i) {
    ssw += (d[i].array() - means(i)).square().sum();
    ssb += T * std::pow(means(i) - grand, 2);
  }
  const double s2 = ssw / (n * (T - 1));
  const double tau2 = (ssb / n - s2) / T;
  ASSERT_GT(tau2, 0.0);

  mhmm::MhmmParams init = gaussian_params(MatrixXd::Zero(1, 1), VectorXd::Ones(1), 1.0);
  mhmm::AvemConfig c;
  c.rel_tol = 1e-300;
  c.max_iter = 5000;
  const auto fit = mhmm::fit_mhmm(d, init, c);
  const auto& g = dynamic_cast<const GaussianEmission&>(*fit.params.emission);
  EXPECT_NEAR(g.mu()(0, 0), grand, 1e-6);
  EXPECT_NEAR(g.sigma2()(0), s2, 1e-6);
  EXPECT_NEAR(fit.params.sigma(0, 0), tau2, 1e-6);
  for (Index i = 0; i < n; ++i)
    EXPECT_NEAR(fit.q_factors[i].nu(0), T * tau2 / (T * tau2 + s2) * (means(i) - grand), 1e-6);
}

TEST(FitMhmm, ScenarioOneRmseFallsWithT) {
  std::vector<double> med;
  for (Index T : {20, 80}) {
    sim::MonteCarloConfig mc;
    mc.scenario.K = 3;
    mc.scenario.n = 40;
    mc.scenario.T = T;
    mc.scenario.seed = 23;
    mc.methods = {sim::parse_method("avem")};
    mc.n_reps = 5;
    med.push_back(sim::median_metric(sim::run_monte_carlo(mc), "avem", &sim::ReplicateResult::rmse_mu));
  }
  EXPECT_LT(med[1], med[0]);
}

TEST(FitMhmm, ElboNearlyMonotoneAndOnePassPerSubject) {
  const Index n = 30, T = 50;
  const Dataset d = scenario_data(n, T, 1.0, 24, 3, 2);
  const auto before = hmm::forward_pass_count();
  const auto fit = mhmm::fit_mhmm(d, mhmm::default_init_gaussian(d, 3), mhmm::AvemConfig{});
  EXPECT_EQ(hmm::forward_pass_count() - before, static_cast<std::uint64_t>(n * fit.n_iter));
  ASSERT_EQ(static_cast<int>(fit.elbo_trace.size()), fit.n_iter);
  for (auto v : fit.forward_passes) EXPECT_EQ(v, static_cast<std::uint64_t>(n));
  for (std::size_t i = 3; i < fit.elbo_trace.size(); ++i)
    EXPECT_GE((fit.elbo_trace[i] - fit.elbo_trace[i - 1]) / (n * T), -10.0 / T);
}

TEST(FitMhmm, PrecisionGrowsLinearlyInT) {
  MatrixXd mu(2, 1);
  mu << 1.5, -1.5;
  const auto p = gaussian_params(mu, VectorXd::Ones(2), 1.0);
  std::mt19937_64 rng(25);
  for (int i = 0; i < 20; ++i) {
    const MatrixXd seq = random_matrix(rng, 40, 1, 1.5);
    MatrixXd twice(80, 1);
    twice << seq, seq;
    const auto a = mhmm::update_q_closed_form(p, seq, mhmm::e_step_local(p, seq, VectorXd::Zero(1)));
    const auto b = mhmm::update_q_closed_form(p, twice, mhmm::e_step_local(p, twice, VectorXd::Zero(1)));
    const double ratio = a.omega.trace() / b.omega.trace();
    EXPECT_GE(ratio, 1.6);
    EXPECT_LE(ratio, 2.4);
  }
}

TEST(FitMhmm, MStepBlocksDoNotDecreaseElbo) {
  const Dataset d = scenario_data(15, 30, 1.0, 26);
  auto p = mhmm::default_init_gaussian(d, 2);
  std::vector<hmm::StatePosterior> posts;
  std::vector<mhmm::QFactor> q;
  for (std::size_t i = 0; i < d.size(); ++i) {
    posts.push_back(mhmm::e_step_local(p, d[i], VectorXd::Zero(1)));
    q.push_back(mhmm::update_q_closed_form(p, d[i], posts.back()));
  }
  auto elbo = [&](const mhmm::MhmmParams& x) {
    return mhmm::anchored_elbo_given_posteriors(x, d, q, posts, 9);
  };
  double cur = elbo(p);
  p.chain.pi = mhmm::m_step_pi(posts);
  EXPECT_GE(elbo(p), cur - 1e-8);
  cur = elbo(p);
  p.chain.gamma = mhmm::m_step_gamma(posts).gamma;
  EXPECT_GE(elbo(p), cur - 1e-8);
  cur = elbo(p);
  p.emission = mhmm::m_step_theta_e(*p.emission, d, posts, q, 9);
  EXPECT_GE(elbo(p), cur - 1e-8);
  cur = elbo(p);
  p.sigma = mhmm::m_step_sigma(q);
  EXPECT_GE(elbo(p), cur - 1e-8);
}

TEST(FitMhmm, DeterministicReports) {
  const Dataset d = scenario_data(12, 30, 1.0, 27);
  const auto init = mhmm::default_init_gaussian(d, 2);
  mhmm::AvemConfig c;
  const auto a = mhmm::fit_mhmm(d, init, c);
  c.threads = 3;
  const auto b = mhmm::fit_mhmm(d, init, c);
  ASSERT_EQ(a.elbo_trace.size(), b.elbo_trace.size());
  for (std::size_t i = 0; i < a.elbo_trace.size(); ++i) EXPECT_EQ(a.elbo_trace[i], b.elbo_trace[i]);
  for (std::size_t i = 0; i < a.q_factors.size(); ++i) {
    EXPECT_EQ(a.q_factors[i].nu(0), b.q_factors[i].nu(0));
    EXPECT_EQ(a.q_factors[i].omega(0, 0), b.q_factors[i].omega(0, 0));
  }
  EXPECT_TRUE((a.params.emission->parameter_vector().array() ==
               b.params.emission->parameter_vector().array()).all());
}

TEST(AvemConfig, RejectsBadSettings) {
  mhmm::AvemConfig c;
  c.rel_tol = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(mhmm::parse_e_step_method("newton"), ConfigError);
  EXPECT_EQ(mhmm::parse_e_step_method("laplace"), mhmm::EStepMethod::laplace);
}
