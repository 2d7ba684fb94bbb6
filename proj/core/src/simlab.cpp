#include "avem/simlab.hpp"

#include "avem/error.hpp"
#include "avem/parallel.hpp"
#include "avem/rng.hpp"

#include <algorithm>
#include <cmath>

namespace avem::sim {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::gaussian_mhmm: return "gaussian_mhmm";
    case Variant::bernoulli_mhmm: return "bernoulli_mhmm";
    case Variant::messm: return "messm";
    case Variant::localized: return "localized";
  }
  return "gaussian_mhmm";
}

Variant parse_variant(const std::string& s) {
  if (s == "gaussian_mhmm") return Variant::gaussian_mhmm;
  if (s == "bernoulli_mhmm") return Variant::bernoulli_mhmm;
  if (s == "messm") return Variant::messm;
  if (s == "localized") return Variant::localized;
  throw ConfigError("unknown scenario variant '" + s + "'", "variant");
}

void ScenarioSpec::validate() const {
  if (n < 1) throw ConfigError("n must be positive", "n");
  if (T < 1) throw ConfigError("T must be positive", "T");
  if (K < 1) throw ConfigError("K must be positive", "K");
  if (d < 1) throw ConfigError("d must be positive", "d");
  if (tau2 < 0.0) throw ConfigError("tau2 must be nonnegative", "tau2");
  if (!(gamma_diag > 0.0 && gamma_diag < 1.0) && K > 1)
    throw ConfigError("gamma_diag must lie in (0, 1)", "gamma_diag");
  if (tau_a2 < 0.0 || tau_b2 < 0.0) throw ConfigError("localized variances must be nonnegative", "tau_b2");
  if (t0 < 0) throw ConfigError("t0 must be nonnegative", "t0");
  if (messm_sigma < 0.0) throw ConfigError("messm_sigma must be nonnegative", "messm_sigma");
  if (!(messm_r > 0.0)) throw ConfigError("messm_r must be positive", "messm_r");
  if (variant == Variant::bernoulli_mhmm && K != 2)
    throw ConfigError("the Bernoulli scenario has K = 2", "K");
  if (variant == Variant::localized && K != 2)
    throw ConfigError("the localized scenario has K = 2", "K");
}

VectorXd stationary_distribution(const MatrixXd& gamma) {
  const Index K = gamma.rows();
  if (K < 1 || gamma.cols() != K) throw DimensionError("stationary_distribution: Gamma must be square");
  // (Gamma^T - I) pi = 0 with the last equation replaced by sum(pi) = 1.
  MatrixXd a = gamma.transpose() - MatrixXd::Identity(K, K);
  a.row(K - 1).setOnes();
  VectorXd b = VectorXd::Zero(K);
  b(K - 1) = 1.0;
  Eigen::FullPivLU<MatrixXd> lu(a);
  lu.setThreshold(1e-10);
  if (!lu.isInvertible())
    throw NumericalError("stationary_distribution: chain is reducible (no unique stationary law)");
  VectorXd pi = lu.solve(b);
  if ((pi.array() < -1e-12).any())
    throw NumericalError("stationary_distribution: chain is reducible");
  pi = pi.cwiseMax(0.0);
  return pi / pi.sum();
}

VectorXd mean_ladder(Index K) {
  switch (K) {
    case 1: return VectorXd::Zero(1);
    case 2: return (VectorXd(2) << 1.5, -1.5).finished();
    case 3: return (VectorXd(3) << 1.5, 0.0, -1.5).finished();
    case 4: return (VectorXd(4) << 1.5, 0.5, -0.5, -1.5).finished();
    default: return VectorXd::LinSpaced(K, 1.5, -1.5);
  }
}

MatrixXd sticky_gamma(Index K, double diag) { return mhmm::sticky_chain(K, diag).gamma; }

MatrixXd messm_true_G() { return (MatrixXd(2, 2) << 0.70, -0.10, 0.10, 0.60).finished(); }

MatrixXd messm_true_H() {
  return (MatrixXd(4, 2) << 1.0, 0.0, 0.2, 0.9, 0.3, 0.4, 0.4, 0.2).finished();
}

namespace {

Index draw_categorical(Rng& rng, const Eigen::Ref<const VectorXd>& p) {
  const double u = NormalSampler::uniform(rng);
  double acc = 0.0;
  for (Index k = 0; k < p.size(); ++k) {
    acc += p(k);
    if (u < acc) return k;
  }
  return p.size() - 1;
}

double spectral_radius(const MatrixXd& a) {
  return Eigen::EigenSolver<MatrixXd>(a, false).eigenvalues().cwiseAbs().maxCoeff();
}

std::vector<Index> draw_path(Rng& rng, const hmm::ChainParams& chain, Index T) {
  std::vector<Index> u(static_cast<std::size_t>(T));
  u[0] = draw_categorical(rng, chain.pi);
  for (Index t = 1; t < T; ++t)
    u[static_cast<std::size_t>(t)] =
        draw_categorical(rng, chain.gamma.row(u[static_cast<std::size_t>(t - 1)]).transpose());
  return u;
}

hmm::ChainParams scenario_chain(const ScenarioSpec& spec) {
  hmm::ChainParams c;
  c.gamma = sticky_gamma(spec.K, spec.gamma_diag);
  c.pi = stationary_distribution(c.gamma);
  return c;
}

double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double rmse(const VectorXd& a, const VectorXd& b) {
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

VectorXd flatten_rows(const MatrixXd& m) {
  VectorXd out(m.size());
  Index pos = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) out(pos++) = m(r, c);
  return out;
}

}  // namespace

Simulated gen_gaussian_mhmm(const ScenarioSpec& spec, std::uint64_t replicate) {
  spec.validate();
  Simulated s;
  s.truth.chain = scenario_chain(spec);
  const VectorXd a = mean_ladder(spec.K);
  MatrixXd mu(spec.K, spec.d);
  for (Index k = 0; k < spec.K; ++k) mu.row(k).setConstant(a(k));
  auto em = std::make_shared<GaussianEmission>(mu, VectorXd::Ones(spec.K));
  s.truth.emission = em;
  s.truth.sigma = spec.tau2 * MatrixXd::Identity(spec.d, spec.d);
  const double tau = std::sqrt(spec.tau2);
  for (Index i = 0; i < spec.n; ++i) {
    Rng rng(derive_seed(spec.seed, replicate, static_cast<std::uint64_t>(i)));
    NormalSampler normal;
    VectorXd f(spec.d);
    for (Index c = 0; c < spec.d; ++c) f(c) = tau * normal(rng);
    const auto path = draw_path(rng, s.truth.chain, spec.T);
    MatrixXd seq(spec.T, spec.d);
    for (Index t = 0; t < spec.T; ++t)
      for (Index c = 0; c < spec.d; ++c)
        seq(t, c) = mu(path[static_cast<std::size_t>(t)], c) + f(c) + normal(rng);
    s.data.sequences.push_back(std::move(seq));
    s.truth.effects.push_back(f);
    s.truth.states.push_back(path);
  }
  return s;
}

Simulated gen_bernoulli_mhmm(const ScenarioSpec& spec, std::uint64_t replicate) {
  spec.validate();
  Simulated s;
  s.truth.chain = scenario_chain(spec);
  const VectorXd beta = (VectorXd(2) << -1.5, 1.5).finished();
  s.truth.emission = std::make_shared<BernoulliEmission>(beta);
  s.truth.sigma = spec.tau2 * MatrixXd::Identity(1, 1);
  const double tau = std::sqrt(spec.tau2);
  for (Index i = 0; i < spec.n; ++i) {
    Rng rng(derive_seed(spec.seed, replicate, static_cast<std::uint64_t>(i)));
    NormalSampler normal;
    VectorXd f(1);
    f(0) = tau * normal(rng);
    const auto path = draw_path(rng, s.truth.chain, spec.T);
    MatrixXd seq(spec.T, 1);
    for (Index t = 0; t < spec.T; ++t) {
      const double pr = logistic(beta(path[static_cast<std::size_t>(t)]) + f(0));
      seq(t, 0) = NormalSampler::uniform(rng) < pr ? 1.0 : 0.0;
    }
    s.data.sequences.push_back(std::move(seq));
    s.truth.effects.push_back(f);
    s.truth.states.push_back(path);
  }
  return s;
}

Simulated gen_localized(const ScenarioSpec& spec, std::uint64_t replicate) {
  spec.validate();
  Simulated s;
  s.truth.chain = scenario_chain(spec);
  MatrixXd mu(2, 1);
  mu << spec.separation, -spec.separation;
  s.truth.emission = std::make_shared<pavem::LocalizedGaussianEmission>(
      mu, VectorXd::Ones(2), spec.t0, std::max(spec.tau_a2, 1e-300), std::max(spec.tau_b2, 1e-300));
  s.truth.sigma = MatrixXd::Zero(2, 2);
  s.truth.sigma.diagonal() << spec.tau_a2, spec.tau_b2;
  const double sa = std::sqrt(spec.tau_a2);
  const double sb = std::sqrt(spec.tau_b2);
  for (Index i = 0; i < spec.n; ++i) {
    Rng rng(derive_seed(spec.seed, replicate, static_cast<std::uint64_t>(i)));
    NormalSampler normal;
    VectorXd f(2);
    f(0) = sa * normal(rng);
    f(1) = sb * normal(rng);
    const auto path = draw_path(rng, s.truth.chain, spec.T);
    MatrixXd seq(spec.T, 1);
    for (Index t = 0; t < spec.T; ++t)
      seq(t, 0) = mu(path[static_cast<std::size_t>(t)], 0) + f(0) + (t < spec.t0 ? f(1) : 0.0) +
                  normal(rng);
    s.data.sequences.push_back(std::move(seq));
    s.truth.effects.push_back(f);
    s.truth.states.push_back(path);
  }
  return s;
}

Simulated gen_messm(const ScenarioSpec& spec, std::uint64_t replicate) {
  spec.validate();
  Simulated s;
  s.truth.G = messm_true_G();
  s.truth.H = messm_true_H();
  const Index q = 2;
  const Index p = 4;
  s.truth.r = VectorXd::Constant(p, spec.messm_r);
  const double sd = std::sqrt(spec.messm_sigma);
  const VectorXd g = messm::vec(s.truth.G);
  const VectorXd h = messm::vecl(s.truth.H);
  const double sr = std::sqrt(spec.messm_r);
  for (Index i = 0; i < spec.n; ++i) {
    Rng rng(derive_seed(spec.seed, replicate, static_cast<std::uint64_t>(i)));
    NormalSampler normal;
    VectorXd gi = g, hi = h;
    for (int attempt = 0;; ++attempt) {
      for (Index j = 0; j < gi.size(); ++j) gi(j) = g(j) + sd * normal(rng);
      if (!spec.messm_stationary || spectral_radius(messm::unvec(gi, q, q)) < 1.0) break;
      if (attempt == 10000)
        throw ConfigError("could not draw a stable subject transition matrix", "messm_sigma");
    }
    for (Index j = 0; j < hi.size(); ++j) hi(j) += sd * normal(rng);
    const MatrixXd Gi = messm::unvec(gi, q, q);
    const MatrixXd Hi = messm::unvecl(hi, p, q);
    MatrixXd u(spec.T, q), seq(spec.T, p);
    VectorXd state(q);
    for (Index c = 0; c < q; ++c) state(c) = normal(rng);
    for (Index t = 0; t < spec.T; ++t) {
      if (t > 0) {
        VectorXd next = Gi * state;
        for (Index c = 0; c < q; ++c) next(c) += normal(rng);
        state = next;
      }
      u.row(t) = state.transpose();
      const VectorXd y = Hi * state;
      for (Index j = 0; j < p; ++j) seq(t, j) = y(j) + sr * normal(rng);
    }
    s.data.sequences.push_back(std::move(seq));
    s.truth.G_i.push_back(Gi);
    s.truth.H_i.push_back(Hi);
    s.truth.latent.push_back(u);
  }
  return s;
}

Simulated generate(const ScenarioSpec& spec, std::uint64_t replicate) {
  switch (spec.variant) {
    case Variant::gaussian_mhmm: return gen_gaussian_mhmm(spec, replicate);
    case Variant::bernoulli_mhmm: return gen_bernoulli_mhmm(spec, replicate);
    case Variant::messm: return gen_messm(spec, replicate);
    case Variant::localized: return gen_localized(spec, replicate);
  }
  throw ConfigError("unknown scenario variant", "variant");
}

ReplicateResult score_mhmm(const mhmm::FitReport& fit, const Truth& truth) {
  ReplicateResult r;
  r.n_iter = fit.n_iter;
  r.converged = fit.converged;
  r.wall_time = fit.wall_time_seconds;
  const mhmm::MhmmParams est = mhmm::align_states(fit.params);
  const mhmm::MhmmParams tru = mhmm::align_states(
      mhmm::MhmmParams{truth.chain, truth.emission, MatrixXd::Identity(truth.emission->effect_dim(),
                                                                        truth.emission->effect_dim())});
  if (est.chain.n_states() == tru.chain.n_states())
    r.gamma_abs_err = (est.chain.gamma - tru.chain.gamma).cwiseAbs().mean();
  const auto* le = dynamic_cast<const LinearGaussianEmission*>(est.emission.get());
  const auto* lt = dynamic_cast<const LinearGaussianEmission*>(tru.emission.get());
  if (le && lt && le->mu().rows() == lt->mu().rows()) {
    r.rmse_mu = rmse(flatten_rows(le->mu()), flatten_rows(lt->mu()));
    r.rmse_sigma2 = rmse(le->sigma2(), lt->sigma2());
  }
  const auto* be = dynamic_cast<const BernoulliEmission*>(est.emission.get());
  const auto* bt = dynamic_cast<const BernoulliEmission*>(tru.emission.get());
  if (be && bt && be->beta().size() == bt->beta().size()) r.rmse_beta = rmse(be->beta(), bt->beta());

  const Index d = est.effect_dim();
  const std::size_t n = std::min(fit.q_factors.size(), truth.effects.size());
  if (n > 0) {
    const bool localized_fit = d == 2 && truth.effects.front().size() == 2 &&
                               dynamic_cast<const pavem::LocalizedGaussianEmission*>(truth.emission.get());
    double mf = 0.0, mfb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const VectorXd& nu = fit.q_factors[i].nu;
      const VectorXd& f = truth.effects[i];
      if (localized_fit) {
        mf += std::pow(nu(0) - f(0), 2);
        mfb += std::pow(nu(1) - f(1), 2);
      } else {
        mf += (nu - f.head(d)).squaredNorm();
      }
    }
    r.mse_f = mf / static_cast<double>(n);
    if (localized_fit) r.mse_fb = mfb / static_cast<double>(n);
  }
  return r;
}

ReplicateResult score_pavem(const pavem::PavemReport& fit, const Truth& truth) {
  ReplicateResult r = score_mhmm(fit.fit, truth);
  const std::size_t n = std::min(fit.fb_hat.size(), truth.effects.size());
  double mfa = 0.0, mfb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mfa += std::pow(fit.fit.q_factors[i].nu(0) - truth.effects[i](0), 2);
    mfb += std::pow(fit.fb_hat[i] - truth.effects[i](1), 2);
  }
  if (n > 0) {
    r.mse_f = mfa / static_cast<double>(n);
    r.mse_fb = mfb / static_cast<double>(n);
  }
  return r;
}

ReplicateResult score_messm(const messm::MessmFitReport& fit, const Truth& truth) {
  ReplicateResult r;
  r.n_iter = fit.n_iter;
  r.converged = fit.converged;
  r.wall_time = fit.wall_time_seconds;
  const messm::MessmParams est = messm::align_signs(fit.params, &truth.H);
  r.rmse_G = rmse(est.mu_g, messm::vec(truth.G));
  r.rmse_H = rmse(est.mu_h, messm::vecl(truth.H));
  r.rmse_R = rmse(est.r, truth.r);
  return r;
}

std::string MethodSpec::label() const {
  switch (kind) {
    case MethodKind::avem:
      return e_step == mhmm::EStepMethod::automatic ? "avem" : "avem_" + mhmm::to_string(e_step);
    case MethodKind::pavem: return "pavem_J" + std::to_string(nodes);
    case MethodKind::qem: return "qem_J" + std::to_string(nodes);
    case MethodKind::mcem: return "mcem_M" + std::to_string(nodes);
  }
  return "avem";
}

MethodSpec parse_method(const std::string& s) {
  MethodSpec m;
  auto number = [&](const std::string& prefix) {
    const std::string tail = s.substr(prefix.size());
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tail, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tail.size() || v < 1) throw ConfigError("bad method '" + s + "'", "methods");
    return v;
  };
  if (s == "avem") return m;
  if (s.rfind("avem_", 0) == 0) {
    m.e_step = mhmm::parse_e_step_method(s.substr(5));
    return m;
  }
  if (s.rfind("pavem_J", 0) == 0) {
    m.kind = MethodKind::pavem;
    m.nodes = number("pavem_J");
    return m;
  }
  if (s.rfind("qem_J", 0) == 0) {
    m.kind = MethodKind::qem;
    m.nodes = number("qem_J");
    return m;
  }
  if (s.rfind("mcem_M", 0) == 0) {
    m.kind = MethodKind::mcem;
    m.nodes = number("mcem_M");
    return m;
  }
  throw ConfigError("unknown method '" + s + "'", "methods");
}

ReplicateResult run_method(const Simulated& sim, const ScenarioSpec& spec,
                           const MethodSpec& method, std::uint64_t replicate,
                           const MonteCarloConfig& config) {
  mhmm::AvemConfig ac;
  ac.max_iter = config.max_iter;
  ac.rel_tol = config.rel_tol;
  ac.threads = 1;
  ac.e_step = method.e_step;
  ac.n_quad = method.n_quad;
  ac.seed = derive_seed(spec.seed, replicate, 0x6d63656dULL);
  ReplicateResult r;

  if (spec.variant == Variant::messm) {
    if (method.kind != MethodKind::avem)
      throw ConfigError("the state-space scenario supports only avem", "methods");
    messm::MessmConfig mc;
    mc.max_iter = config.max_iter;
    mc.rel_tol = config.rel_tol;
    mc.sign_align = config.sign_align;
    const messm::MessmParams init = messm::default_init_messm(sim.data, 2);
    r = score_messm(messm::fit_messm(sim.data, init, mc), sim.truth);
  } else if (spec.variant == Variant::localized) {
    mhmm::MhmmParams base = mhmm::default_init_gaussian(sim.data, spec.K);
    if (method.kind == MethodKind::avem) {
      const auto& g = dynamic_cast<const GaussianEmission&>(*base.emission);
      base.emission = std::make_shared<pavem::LocalizedGaussianEmission>(
          g.mu(), g.sigma2(), spec.t0, 1.0, 1.0);
      base.sigma = MatrixXd::Identity(2, 2);
      r = score_mhmm(mhmm::fit_mhmm(sim.data, base, ac), sim.truth);
    } else if (method.kind == MethodKind::pavem) {
      pavem::PavemConfig pc;
      pc.avem = ac;
      pc.n_nodes = method.nodes;
      r = score_pavem(pavem::fit_pavem(sim.data, pavem::PavemParams{base, spec.t0, 1.0}, pc),
                      sim.truth);
    } else {
      throw ConfigError("the localized scenario supports avem and pavem", "methods");
    }
  } else {
    const mhmm::MhmmParams init = spec.variant == Variant::bernoulli_mhmm
                                      ? mhmm::default_init_bernoulli(sim.data, spec.K)
                                      : mhmm::default_init_gaussian(sim.data, spec.K);
    switch (method.kind) {
      case MethodKind::avem: r = score_mhmm(mhmm::fit_mhmm(sim.data, init, ac), sim.truth); break;
      case MethodKind::qem:
        r = score_mhmm(exact::fit_qem(sim.data, init, method.nodes, ac), sim.truth);
        break;
      case MethodKind::mcem:
        r = score_mhmm(exact::fit_mcem(sim.data, init, method.nodes, ac), sim.truth);
        break;
      case MethodKind::pavem:
        throw ConfigError("pavem needs the localized scenario", "methods");
    }
  }
  r.method = method.label();
  r.replicate = replicate;
  return r;
}

std::vector<ReplicateResult> run_monte_carlo(const MonteCarloConfig& config) {
  config.scenario.validate();
  if (config.methods.empty()) throw ConfigError("at least one method is required", "methods");
  if (config.n_reps < 1) throw ConfigError("n_reps must be positive", "n_reps");
  const std::size_t reps = static_cast<std::size_t>(config.n_reps);
  const std::size_t m = config.methods.size();
  std::vector<ReplicateResult> rows(reps * m);
  parallel_for(reps, resolve_threads(config.threads), [&](std::size_t k) {
    const std::uint64_t rep = config.first_replicate + k;
    const Simulated sim = generate(config.scenario, rep);
    for (std::size_t j = 0; j < m; ++j)
      rows[k * m + j] = run_method(sim, config.scenario, config.methods[j], rep, config);
  });
  return rows;
}

double median_metric(const std::vector<ReplicateResult>& rows, const std::string& method,
                     std::optional<double> ReplicateResult::*metric) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.method == method && (r.*metric).has_value()) v.push_back(*(r.*metric));
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace avem::sim
