#include "avem/mhmm.hpp"

#include "avem/error.hpp"
#include "avem/parallel.hpp"
#include "avem/quadrature.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace avem::mhmm {

namespace {

const LinearGaussianEmission* as_linear_gaussian(const EmissionModel& e) {
  return dynamic_cast<const LinearGaussianEmission*>(&e);
}

void check_subject(const MhmmParams& params, const MatrixXd& seq,
                   const hmm::StatePosterior& post) {
  if (post.zeta.rows() != seq.rows() || post.zeta.cols() != params.chain.n_states())
    throw DimensionError("posterior shape does not match subject data");
}

// Sum over nodes f_j = nu + L x_j of w_j sum_t sum_k zeta log e, plus the
// weighted gradient/Hessian sums when requested.
struct NodeSums {
  double value = 0.0;
  VectorXd grad;                 // sum_j w_j g_j
  MatrixXd grad_x;               // sum_j w_j g_j x_j^T
  MatrixXd hess;                 // sum_j w_j H_j
};

NodeSums node_sums(const EmissionModel& em, const MatrixXd& seq, const MatrixXd& zeta,
                   const TensorRule& rule, const VectorXd& nu, const MatrixXd& chol,
                   bool with_hess) {
  const Index d = nu.size();
  NodeSums s;
  s.grad = VectorXd::Zero(d);
  s.grad_x = MatrixXd::Zero(d, d);
  s.hess = MatrixXd::Zero(d, d);
  const Index K = zeta.cols();
  for (Index j = 0; j < rule.nodes.rows(); ++j) {
    const VectorXd x = rule.nodes.row(j).transpose();
    const VectorXd f = nu + chol * x;
    const double w = rule.weights(j);
    double v = 0.0;
    VectorXd g = VectorXd::Zero(d);
    MatrixXd h = MatrixXd::Zero(d, d);
    for (Index t = 0; t < seq.rows(); ++t) {
      for (Index k = 0; k < K; ++k) {
        const double z = zeta(t, k);
        if (z == 0.0) continue;
        v += z * em.log_e(k, t, f, seq);
        g += z * em.grad_f(k, t, f, seq);
        if (with_hess) h += z * em.hess_f(k, t, f, seq);
      }
    }
    s.value += w * v;
    s.grad += w * g;
    s.grad_x += w * g * x.transpose();
    if (with_hess) s.hess += w * h;
  }
  return s;
}

double kl_to_prior(const VectorXd& nu, const MatrixXd& omega, const MatrixXd& sigma) {
  return gaussian_kl(nu, omega, VectorXd::Zero(nu.size()), sigma);
}

// Minimizes phi by BFGS with Armijo backtracking. Returns the final max-norm
// of the gradient.
double bfgs_minimize(const std::function<double(const VectorXd&, VectorXd&)>& phi, VectorXd& x,
                     int max_iter, double grad_tol) {
  const Index n = x.size();
  VectorXd g(n);
  double fx = phi(x, g);
  MatrixXd hinv = MatrixXd::Identity(n, n);
  for (int it = 0; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < grad_tol) break;
    VectorXd dir = -hinv * g;
    double slope = g.dot(dir);
    if (slope >= 0.0) {
      hinv.setIdentity();
      dir = -g;
      slope = -g.squaredNorm();
    }
    double step = 1.0;
    VectorXd xn(n), gn(n);
    double fn = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      xn = x + step * dir;
      fn = phi(xn, gn);
      if (std::isfinite(fn) && fn <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const VectorXd s = xn - x;
    const VectorXd y = gn - g;
    const double sy = s.dot(y);
    if (sy > 1e-14 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const MatrixXd id = MatrixXd::Identity(n, n);
      hinv = (id - rho * s * y.transpose()) * hinv * (id - rho * y * s.transpose()) +
             rho * s * s.transpose();
    }
    const bool stalled = fx - fn <= 1e-15 * std::max(1.0, std::abs(fx));
    x = xn;
    g = gn;
    fx = fn;
    if (stalled) break;
  }
  return g.lpNorm<Eigen::Infinity>();
}

}  // namespace

void MhmmParams::validate() const {
  chain.validate();
  if (!emission) throw DimensionError("MhmmParams: emission model missing");
  if (emission->n_states() != chain.n_states())
    throw DimensionError("MhmmParams: emission and chain disagree on K");
  if (sigma.rows() != emission->effect_dim() || sigma.cols() != emission->effect_dim())
    throw DimensionError("MhmmParams: Sigma must be d x d");
  if (!is_spd(sigma)) throw DimensionError("MhmmParams: Sigma must be symmetric PD");
}

std::string to_string(EStepMethod m) {
  switch (m) {
    case EStepMethod::automatic: return "auto";
    case EStepMethod::closed_form: return "closed_form";
    case EStepMethod::laplace: return "laplace";
    case EStepMethod::quadrature: return "quadrature";
  }
  return "auto";
}

EStepMethod parse_e_step_method(const std::string& s) {
  if (s == "auto") return EStepMethod::automatic;
  if (s == "closed_form") return EStepMethod::closed_form;
  if (s == "laplace") return EStepMethod::laplace;
  if (s == "quadrature") return EStepMethod::quadrature;
  throw ConfigError("unknown e-step method '" + s + "'", "e_step_method");
}

void AvemConfig::validate() const {
  if (max_iter < 1) throw ConfigError("max_iter must be positive", "max_iter");
  if (!(rel_tol > 0.0)) throw ConfigError("rel_tol must be positive", "rel_tol");
  if (n_quad < 1) throw ConfigError("n_quad must be at least 1", "n_quad");
  if (e_step == EStepMethod::quadrature && n_quad < 3)
    throw ConfigError("quadrature e-step needs n_quad >= 3", "n_quad");
}

// --- E-step ---------------------------------------------------------------

hmm::StatePosterior e_step_local(const MhmmParams& params, const MatrixXd& seq,
                                 const VectorXd& f0) {
  if (f0.size() != params.effect_dim()) throw DimensionError("e_step_local: anchor has wrong size");
  if (!f0.allFinite()) throw DimensionError("e_step_local: anchor is not finite");
  return hmm::forward_backward(params.emission->log_emission_matrix(f0, seq), params.chain);
}

QFactor update_q_closed_form(const MhmmParams& params, const MatrixXd& seq,
                             const hmm::StatePosterior& post) {
  const auto* lg = as_linear_gaussian(*params.emission);
  if (!lg) throw DimensionError("closed-form q update needs a linear-Gaussian emission");
  check_subject(params, seq, post);
  return detail::closed_form_q(*lg, params.sigma, seq, post.zeta, nullptr);
}

QFactor update_q_laplace(const MhmmParams& params, const MatrixXd& seq,
                         const hmm::StatePosterior& post, const VectorXd& f0) {
  check_subject(params, seq, post);
  const EmissionModel& em = *params.emission;
  const Index d = params.effect_dim();
  const Index K = params.chain.n_states();
  const MatrixXd prec = spd_inverse(params.sigma, "Sigma");

  auto objective = [&](const VectorXd& f) {
    double v = -0.5 * f.dot(prec * f);
    for (Index t = 0; t < seq.rows(); ++t)
      for (Index k = 0; k < K; ++k)
        if (post.zeta(t, k) != 0.0) v += post.zeta(t, k) * em.log_e(k, t, f, seq);
    return v;
  };
  auto derivatives = [&](const VectorXd& f, VectorXd& g, MatrixXd& neg_h) {
    g = -prec * f;
    neg_h = prec;
    for (Index t = 0; t < seq.rows(); ++t)
      for (Index k = 0; k < K; ++k) {
        const double z = post.zeta(t, k);
        if (z == 0.0) continue;
        g += z * em.grad_f(k, t, f, seq);
        neg_h -= z * em.hess_f(k, t, f, seq);
      }
  };

  VectorXd f = f0.size() == d && f0.allFinite() ? f0 : VectorXd::Zero(d);
  VectorXd g;
  MatrixXd neg_h;
  double val = objective(f);
  bool done = false;
  for (int it = 0; it < 50; ++it) {
    derivatives(f, g, neg_h);
    if (g.lpNorm<Eigen::Infinity>() < 1e-8) {
      done = true;
      break;
    }
    Eigen::LLT<MatrixXd> llt(symmetrize(neg_h));
    VectorXd step;
    if (llt.info() == Eigen::Success) {
      step = llt.solve(g);
    } else {
      const double shift = neg_h.diagonal().cwiseAbs().maxCoeff() + 1.0;
      step = (symmetrize(neg_h) + shift * MatrixXd::Identity(d, d)).llt().solve(g);
    }
    double alpha = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const VectorXd cand = f + alpha * step;
      const double cv = objective(cand);
      if (std::isfinite(cv) && cv >= val - 1e-12 * std::abs(val)) {
        f = cand;
        val = cv;
        improved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!improved) break;
  }
  if (!done) {
    derivatives(f, g, neg_h);
    if (g.lpNorm<Eigen::Infinity>() >= 1e-8 * std::max(1.0, std::abs(val)))
      throw NumericalError("laplace update: Newton did not converge in 50 steps");
  }
  derivatives(f, g, neg_h);
  const MatrixXd nh = symmetrize(neg_h);
  if (!is_spd(nh)) throw NumericalError("laplace update: Hessian at the mode is not negative definite");
  return {f, spd_inverse(nh, "negative Hessian")};
}

double q_objective(const MhmmParams& params, const MatrixXd& seq, const hmm::StatePosterior& post,
                   const QFactor& q, int n_quad) {
  check_subject(params, seq, post);
  const TensorRule rule = gauss_hermite_tensor(n_quad, static_cast<int>(params.effect_dim()));
  const MatrixXd chol = checked_llt(q.omega, "Omega").matrixL();
  const NodeSums s = node_sums(*params.emission, seq, post.zeta, rule, q.nu, chol, false);
  return s.value - kl_to_prior(q.nu, q.omega, params.sigma);
}

QFactor update_q_quadrature(const MhmmParams& params, const MatrixXd& seq,
                            const hmm::StatePosterior& post, const QFactor& prev, int n_quad) {
  if (n_quad < 3) throw ConfigError("quadrature q update needs n_quad >= 3", "n_quad");
  check_subject(params, seq, post);
  const EmissionModel& em = *params.emission;
  const Index d = params.effect_dim();
  const MatrixXd prec = spd_inverse(params.sigma, "Sigma");
  const double logdet_sigma = spd_log_det(params.sigma, "Sigma");
  const TensorRule rule = gauss_hermite_tensor(n_quad, static_cast<int>(d));

  auto objective = [&](const VectorXd& nu, const MatrixXd& chol, NodeSums* out, bool hess) {
    NodeSums s = node_sums(em, seq, post.zeta, rule, nu, chol, hess);
    const MatrixXd omega = chol * chol.transpose();
    double logdet_omega = 0.0;
    for (Index i = 0; i < d; ++i) logdet_omega += 2.0 * std::log(chol(i, i));
    const double kl = 0.5 * ((prec * omega).trace() + nu.dot(prec * nu) - static_cast<double>(d) +
                             logdet_sigma - logdet_omega);
    const double v = s.value - kl;
    if (out) *out = std::move(s);
    return v;
  };

  VectorXd nu = prev.nu.size() == d && prev.nu.allFinite() ? prev.nu : VectorXd::Zero(d);
  MatrixXd chol = is_spd(prev.omega) && prev.omega.rows() == d
                      ? MatrixXd(checked_llt(prev.omega, "Omega").matrixL())
                      : MatrixXd(checked_llt(params.sigma, "Sigma").matrixL());

  // Newton-type fixed point: Omega = (Sigma^{-1} - E[H])^{-1}, nu moved by the
  // expected gradient.
  NodeSums s;
  double val = objective(nu, chol, &s, true);
  for (int it = 0; it < 30; ++it) {
    const MatrixXd np = symmetrize(prec - s.hess);
    Eigen::LLT<MatrixXd> llt(np);
    if (llt.info() != Eigen::Success) break;
    const VectorXd step = llt.solve(s.grad - prec * nu);
    const MatrixXd omega_new = spd_inverse(np, "quadrature precision");
    const MatrixXd chol_new = checked_llt(omega_new, "Omega").matrixL();
    NodeSums sn;
    const double vn = objective(nu + step, chol_new, &sn, true);
    if (!std::isfinite(vn) || vn < val) break;
    const bool small = vn - val <= 1e-14 * std::max(1.0, std::abs(val));
    nu += step;
    chol = chol_new;
    val = vn;
    s = std::move(sn);
    if (small) break;
  }

  // Polish by direct maximization over (nu, L) with log-diagonal L.
  const Index nl = d * (d + 1) / 2;
  VectorXd theta(d + nl);
  theta.head(d) = nu;
  {
    Index pos = d;
    for (Index c = 0; c < d; ++c)
      for (Index r = c; r < d; ++r) theta(pos++) = r == c ? std::log(chol(r, c)) : chol(r, c);
  }
  auto unpack = [&](const VectorXd& th, VectorXd& n, MatrixXd& l) {
    n = th.head(d);
    l = MatrixXd::Zero(d, d);
    Index pos = d;
    for (Index c = 0; c < d; ++c)
      for (Index r = c; r < d; ++r) l(r, c) = r == c ? std::exp(th(pos++)) : th(pos++);
  };
  auto phi = [&](const VectorXd& th, VectorXd& grad) {
    VectorXd n;
    MatrixXd l;
    unpack(th, n, l);
    NodeSums ns;
    const double v = objective(n, l, &ns, false);
    grad.resize(th.size());
    grad.head(d) = -(ns.grad - prec * n);
    MatrixXd gl = ns.grad_x - prec * l;
    for (Index i = 0; i < d; ++i) gl(i, i) += 1.0 / l(i, i);
    Index pos = d;
    for (Index c = 0; c < d; ++c)
      for (Index r = c; r < d; ++r) grad(pos++) = -(r == c ? gl(r, c) * l(r, c) : gl(r, c));
    return -v;
  };
  const double gnorm = bfgs_minimize(phi, theta, 200, 1e-9 * std::max(1.0, std::abs(val)));
  VectorXd nu_out;
  MatrixXd l_out;
  unpack(theta, nu_out, l_out);
  if (!theta.allFinite() || gnorm > 1e-5 * std::max(1.0, std::abs(val)))
    throw NumericalError("quadrature q update: optimizer did not converge");
  return {nu_out, symmetrize(l_out * l_out.transpose())};
}

// --- M-step ---------------------------------------------------------------

VectorXd m_step_pi(std::span<const hmm::StatePosterior> posts) {
  if (posts.empty()) throw DimensionError("m_step_pi: no subjects");
  const Index K = posts.front().n_states();
  VectorXd pi = VectorXd::Zero(K);
  for (const auto& p : posts) {
    if (p.n_states() != K || p.length() < 1) throw DimensionError("m_step_pi: bad posterior");
    pi += p.zeta.row(0).transpose();
  }
  return pi / pi.sum();
}

GammaUpdate m_step_gamma(std::span<const hmm::StatePosterior> posts) {
  if (posts.empty()) throw DimensionError("m_step_gamma: no subjects");
  const Index K = posts.front().n_states();
  MatrixXd num = MatrixXd::Zero(K, K);
  VectorXd den = VectorXd::Zero(K);
  bool any_pair = false;
  for (const auto& p : posts) {
    if (p.n_states() != K) throw DimensionError("m_step_gamma: bad posterior");
    for (Index t = 0; t + 1 < p.length(); ++t) {
      num += p.xi[static_cast<std::size_t>(t)];
      den += p.zeta.row(t).transpose();
      any_pair = true;
    }
  }
  if (!any_pair) throw DimensionError("m_step_gamma: every subject has T < 2");
  GammaUpdate out;
  out.gamma.resize(K, K);
  for (Index k = 0; k < K; ++k) {
    if (!(den(k) > 1e-300)) {
      out.gamma.row(k).setConstant(1.0 / static_cast<double>(K));
      out.degenerate_rows.push_back(k);
      continue;
    }
    out.gamma.row(k) = num.row(k) / den(k);
    out.gamma.row(k) /= out.gamma.row(k).sum();
  }
  return out;
}

MatrixXd m_step_sigma(std::span<const QFactor> q) {
  if (q.empty()) throw DimensionError("m_step_sigma: no subjects");
  const Index d = q.front().nu.size();
  MatrixXd s = MatrixXd::Zero(d, d);
  for (const auto& f : q) s += f.omega + f.nu * f.nu.transpose();
  return symmetrize(s / static_cast<double>(q.size()));
}

std::shared_ptr<const EmissionModel> m_step_theta_e(const EmissionModel& emission,
                                                    const Dataset& data,
                                                    std::span<const hmm::StatePosterior> posts,
                                                    std::span<const QFactor> q, int n_quad) {
  if (posts.size() != data.size() || q.size() != data.size())
    throw DimensionError("m_step_theta_e: subject counts differ");
  if (const auto* lg = as_linear_gaussian(emission)) {
    std::vector<MatrixXd> zetas;
    zetas.reserve(posts.size());
    for (const auto& p : posts) zetas.push_back(p.zeta);
    return detail::gaussian_m_step(*lg, data, zetas, q, {});
  }
  const TensorRule rule = gauss_hermite_tensor(n_quad, static_cast<int>(emission.effect_dim()));
  std::vector<WeightedEffects> subjects(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const MatrixXd nodes = map_to_gaussian(rule, q[i].nu, q[i].omega);
    auto& s = subjects[i];
    s.data = &data[i];
    for (Index j = 0; j < nodes.rows(); ++j) {
      s.points.push_back(nodes.row(j).transpose());
      s.weights.push_back(rule.weights(j));
      s.zetas.push_back(&posts[i].zeta);
    }
  }
  return emission.fit_weighted(subjects);
}

// --- ELBO -----------------------------------------------------------------

ElboTerms subject_elbo_terms(const MhmmParams& params, const MatrixXd& seq, const QFactor& q,
                             const hmm::StatePosterior& post, int n_quad) {
  check_subject(params, seq, post);
  ElboTerms e;
  if (const auto* lg = as_linear_gaussian(*params.emission)) {
    e.emission = detail::gaussian_expected_loglik(*lg, seq, post.zeta, q, nullptr);
  } else {
    const TensorRule rule = gauss_hermite_tensor(n_quad, static_cast<int>(params.effect_dim()));
    const MatrixXd chol = checked_llt(q.omega, "Omega").matrixL();
    const Index K = params.chain.n_states();
    for (Index j = 0; j < rule.nodes.rows(); ++j) {
      const VectorXd f = q.nu + chol * rule.nodes.row(j).transpose();
      double v = 0.0;
      for (Index t = 0; t < seq.rows(); ++t)
        for (Index k = 0; k < K; ++k)
          if (post.zeta(t, k) != 0.0) v += post.zeta(t, k) * params.emission->log_e(k, t, f, seq);
      e.emission += rule.weights(j) * v;
    }
  }
  e.initial = detail::initial_term(params.chain.pi, post.zeta);
  e.transition = detail::transition_term(params.chain.gamma, post.xi);
  e.kl = kl_to_prior(q.nu, q.omega, params.sigma);
  e.entropy = hmm::posterior_entropy(post);
  return e;
}

double anchored_elbo_given_posteriors(const MhmmParams& params, const Dataset& data,
                                      std::span<const QFactor> q,
                                      std::span<const hmm::StatePosterior> posts, int n_quad) {
  if (q.size() != data.size() || posts.size() != data.size())
    throw DimensionError("anchored_elbo: subject counts differ");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    total += subject_elbo_terms(params, data[i], q[i], posts[i], n_quad).total();
  return total;
}

double anchored_elbo(const MhmmParams& params, const Dataset& data, std::span<const QFactor> q,
                     std::span<const VectorXd> anchors, int n_quad) {
  if (anchors.size() != data.size()) throw DimensionError("anchored_elbo: subject counts differ");
  std::vector<hmm::StatePosterior> posts;
  posts.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    posts.push_back(e_step_local(params, data[i], anchors[i]));
  return anchored_elbo_given_posteriors(params, data, q, posts, n_quad);
}

// --- driver ---------------------------------------------------------------

FitReport fit_mhmm(const Dataset& data, const MhmmParams& init, const AvemConfig& config) {
  data.validate();
  init.validate();
  config.validate();
  if (init.emission->obs_dim() != data.obs_dim())
    throw DimensionError("fit_mhmm: emission dimension does not match the data");

  EStepMethod method = config.e_step;
  const auto* lg0 = as_linear_gaussian(*init.emission);
  if (method == EStepMethod::automatic)
    method = lg0 ? EStepMethod::closed_form : EStepMethod::laplace;
  if (method == EStepMethod::closed_form && !lg0)
    throw ConfigError("closed_form e-step needs a linear-Gaussian emission", "e_step_method");

  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = data.size();
  const unsigned threads = resolve_threads(config.threads);

  FitReport rep;
  rep.params = init;
  rep.q_factors.assign(n, QFactor{VectorXd::Zero(init.effect_dim()), init.sigma});
  rep.anchors.assign(n, VectorXd::Zero(init.effect_dim()));
  std::vector<hmm::StatePosterior> posts(n);
  std::vector<double> subject_elbo(n);
  double prev = 0.0;

  for (int iter = 1; iter <= config.max_iter; ++iter) {
    MhmmParams& p = rep.params;
    for (std::size_t i = 0; i < n; ++i) rep.anchors[i] = rep.q_factors[i].nu;

    parallel_for(n, threads, [&](std::size_t i) {
      posts[i] = e_step_local(p, data[i], rep.anchors[i]);
      switch (method) {
        case EStepMethod::closed_form:
          rep.q_factors[i] = update_q_closed_form(p, data[i], posts[i]);
          break;
        case EStepMethod::laplace:
          rep.q_factors[i] = update_q_laplace(p, data[i], posts[i], rep.anchors[i]);
          break;
        default:
          rep.q_factors[i] =
              update_q_quadrature(p, data[i], posts[i], rep.q_factors[i], config.n_quad);
      }
    });
    rep.forward_passes.push_back(n);

    p.chain.pi = m_step_pi(posts);
    GammaUpdate gu = m_step_gamma(posts);
    p.chain.gamma = std::move(gu.gamma);
    for (Index k : gu.degenerate_rows)
      rep.warnings.push_back("iteration " + std::to_string(iter) + ": transition row " +
                             std::to_string(k) + " had no expected visits and was set uniform");
    p.emission = m_step_theta_e(*p.emission, data, posts, rep.q_factors, config.n_quad);
    if (config.update_sigma) p.sigma = m_step_sigma(rep.q_factors);

    parallel_for(n, threads, [&](std::size_t i) {
      subject_elbo[i] =
          subject_elbo_terms(p, data[i], rep.q_factors[i], posts[i], config.n_quad).total();
    });
    const double elbo = std::accumulate(subject_elbo.begin(), subject_elbo.end(), 0.0);
    if (!std::isfinite(elbo))
      throw NumericalError("fit_mhmm: non-finite ELBO at iteration " + std::to_string(iter));
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

hmm::ChainParams sticky_chain(Index n_states, double diag) {
  if (n_states < 1) throw DimensionError("sticky_chain: K must be positive");
  hmm::ChainParams c;
  c.pi = VectorXd::Constant(n_states, 1.0 / static_cast<double>(n_states));
  if (n_states == 1) {
    c.gamma = MatrixXd::Ones(1, 1);
    return c;
  }
  c.gamma = MatrixXd::Constant(n_states, n_states, (1.0 - diag) / static_cast<double>(n_states - 1));
  c.gamma.diagonal().setConstant(diag);
  return c;
}

namespace {

MatrixXd pooled_rows(const Dataset& data) {
  MatrixXd all(data.total_length(), data.obs_dim());
  Index r = 0;
  for (const auto& s : data.sequences) {
    all.middleRows(r, s.rows()) = s;
    r += s.rows();
  }
  return all;
}

MatrixXd farthest_point_kmeans(const MatrixXd& x, Index k) {
  const Index n = x.rows();
  if (n < k) throw DimensionError("k-means: fewer observations than states");
  const VectorXd mean = x.colwise().mean().transpose();
  MatrixXd c(k, x.cols());
  Index first = 0;
  (x.rowwise() - mean.transpose()).rowwise().squaredNorm().maxCoeff(&first);
  c.row(0) = x.row(first);
  VectorXd mind = (x.rowwise() - c.row(0)).rowwise().squaredNorm();
  for (Index j = 1; j < k; ++j) {
    Index far = 0;
    mind.maxCoeff(&far);
    c.row(j) = x.row(far);
    mind = mind.cwiseMin((x.rowwise() - c.row(j)).rowwise().squaredNorm());
  }
  std::vector<Index> assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < 200; ++it) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      (c.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (assign[static_cast<std::size_t>(i)] != best) {
        assign[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    MatrixXd sum = MatrixXd::Zero(k, x.cols());
    VectorXd cnt = VectorXd::Zero(k);
    for (Index i = 0; i < n; ++i) {
      sum.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      cnt(assign[static_cast<std::size_t>(i)]) += 1.0;
    }
    for (Index j = 0; j < k; ++j)
      if (cnt(j) > 0) c.row(j) = sum.row(j) / cnt(j);
  }
  return c;
}

std::vector<Index> descending_order(const VectorXd& key) {
  std::vector<Index> perm(static_cast<std::size_t>(key.size()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::stable_sort(perm.begin(), perm.end(), [&](Index a, Index b) { return key(a) > key(b); });
  return perm;
}

}  // namespace

MhmmParams default_init_gaussian(const Dataset& data, Index n_states) {
  data.validate();
  const MatrixXd x = pooled_rows(data);
  MatrixXd mu = farthest_point_kmeans(x, n_states);
  const std::vector<Index> perm = descending_order(mu.col(0));
  MatrixXd sorted(mu.rows(), mu.cols());
  for (Index k = 0; k < n_states; ++k) sorted.row(k) = mu.row(perm[static_cast<std::size_t>(k)]);
  const MatrixXd centered = x.rowwise() - x.colwise().mean();
  const double var =
      std::max(1e-6, centered.squaredNorm() / static_cast<double>(x.rows() * x.cols()));
  MhmmParams p;
  p.chain = sticky_chain(n_states, 0.8);
  p.emission = std::make_shared<GaussianEmission>(sorted, VectorXd::Constant(n_states, var));
  p.sigma = MatrixXd::Identity(x.cols(), x.cols());
  return p;
}

MhmmParams default_init_bernoulli(const Dataset& data, Index n_states) {
  data.validate();
  if (data.obs_dim() != 1) throw DimensionError("bernoulli data must have one column");
  const MatrixXd x = pooled_rows(data);
  const double rate = std::clamp(x.mean(), 0.01, 0.99);
  const double base = std::log(rate / (1.0 - rate));
  VectorXd beta(n_states);
  for (Index k = 0; k < n_states; ++k)
    beta(k) = n_states == 1 ? base
                            : base + 1.0 - 2.0 * static_cast<double>(k) /
                                               static_cast<double>(n_states - 1);
  MhmmParams p;
  p.chain = sticky_chain(n_states, 0.8);
  p.emission = std::make_shared<BernoulliEmission>(beta);
  p.sigma = MatrixXd::Identity(1, 1);
  return p;
}

MhmmParams align_states(const MhmmParams& params) {
  VectorXd key;
  const auto* lg = as_linear_gaussian(*params.emission);
  const auto* be = dynamic_cast<const BernoulliEmission*>(params.emission.get());
  if (lg) key = lg->mu().col(0);
  else if (be) key = be->beta();
  else return params;
  const std::vector<Index> perm = descending_order(key);
  const Index K = key.size();
  MhmmParams out = params;
  for (Index a = 0; a < K; ++a) {
    const Index pa = perm[static_cast<std::size_t>(a)];
    out.chain.pi(a) = params.chain.pi(pa);
    for (Index b = 0; b < K; ++b)
      out.chain.gamma(a, b) = params.chain.gamma(pa, perm[static_cast<std::size_t>(b)]);
  }
  if (lg) {
    MatrixXd mu(K, lg->obs_dim());
    VectorXd s2(K);
    for (Index a = 0; a < K; ++a) {
      mu.row(a) = lg->mu().row(perm[static_cast<std::size_t>(a)]);
      s2(a) = lg->sigma2()(perm[static_cast<std::size_t>(a)]);
    }
    out.emission = lg->with_parameters(mu, s2);
  } else {
    VectorXd beta(K);
    for (Index a = 0; a < K; ++a) beta(a) = be->beta()(perm[static_cast<std::size_t>(a)]);
    out.emission = std::make_shared<BernoulliEmission>(beta);
  }
  return out;
}

namespace detail {

QFactor closed_form_q(const LinearGaussianEmission& model, const MatrixXd& sigma,
                      const MatrixXd& seq, const MatrixXd& zeta, const OffsetMoments* off) {
  const Index d = sigma.rows();
  const Index K = model.n_states();
  if (zeta.rows() != seq.rows() || zeta.cols() != K)
    throw DimensionError("closed_form_q: posterior shape mismatch");
  MatrixXd prec = spd_inverse(sigma, "Sigma");
  VectorXd lin = VectorXd::Zero(d);
  for (Index t = 0; t < seq.rows(); ++t) {
    const MatrixXd z = model.design(t);
    const MatrixXd ztz = z.transpose() * z;
    for (Index k = 0; k < K; ++k) {
      const double s2 = model.sigma2()(k);
      prec += (zeta(t, k) / s2) * ztz;
      VectorXd rw = zeta(t, k) * (seq.row(t) - model.mu().row(k)).transpose();
      if (off) rw -= off->first[static_cast<std::size_t>(k)].row(t).transpose();
      lin += z.transpose() * rw / s2;
    }
  }
  const MatrixXd omega = spd_inverse(prec, "q precision");
  return {omega * lin, omega};
}

std::unique_ptr<LinearGaussianEmission> gaussian_m_step(const LinearGaussianEmission& model,
                                                        const Dataset& data,
                                                        std::span<const MatrixXd> zetas,
                                                        std::span<const QFactor> q,
                                                        std::span<const OffsetMoments> off) {
  const Index K = model.n_states();
  const Index p = model.obs_dim();
  const bool has_off = !off.empty();
  if (zetas.size() != data.size() || q.size() != data.size() ||
      (has_off && off.size() != data.size()))
    throw DimensionError("gaussian_m_step: subject counts differ");

  MatrixXd num = MatrixXd::Zero(K, p);
  VectorXd den = VectorXd::Zero(K);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const MatrixXd& seq = data[i];
    for (Index t = 0; t < seq.rows(); ++t) {
      const VectorXd c = seq.row(t).transpose() - model.shift(t, q[i].nu);
      for (Index k = 0; k < K; ++k) {
        VectorXd v = zetas[i](t, k) * c;
        if (has_off) v -= off[i].first[static_cast<std::size_t>(k)].row(t).transpose();
        num.row(k) += v.transpose();
        den(k) += zetas[i](t, k);
      }
    }
  }
  MatrixXd mu = model.mu();
  for (Index k = 0; k < K; ++k)
    if (den(k) > 1e-300) mu.row(k) = num.row(k) / den(k);

  VectorXd acc = VectorXd::Zero(K);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const MatrixXd& seq = data[i];
    for (Index t = 0; t < seq.rows(); ++t) {
      const MatrixXd z = model.design(t);
      const double tr = (z * q[i].omega * z.transpose()).trace();
      const VectorXd c = seq.row(t).transpose() - model.shift(t, q[i].nu);
      for (Index k = 0; k < K; ++k) {
        const VectorXd r = c - mu.row(k).transpose();
        double a = zetas[i](t, k) * (r.squaredNorm() + tr);
        if (has_off)
          a += off[i].second(t, k) -
               2.0 * off[i].first[static_cast<std::size_t>(k)].row(t).dot(r.transpose());
        acc(k) += a;
      }
    }
  }
  VectorXd s2 = model.sigma2();
  for (Index k = 0; k < K; ++k)
    if (den(k) > 1e-300) s2(k) = std::max(1e-10, acc(k) / (static_cast<double>(p) * den(k)));
  return model.with_parameters(mu, s2);
}

double gaussian_expected_loglik(const LinearGaussianEmission& model, const MatrixXd& seq,
                                const MatrixXd& zeta, const QFactor& q,
                                const OffsetMoments* off) {
  const Index K = model.n_states();
  const double p = static_cast<double>(model.obs_dim());
  double total = 0.0;
  for (Index t = 0; t < seq.rows(); ++t) {
    const MatrixXd z = model.design(t);
    const double tr = (z * q.omega * z.transpose()).trace();
    const VectorXd c = seq.row(t).transpose() - model.shift(t, q.nu);
    for (Index k = 0; k < K; ++k) {
      const double s2 = model.sigma2()(k);
      const VectorXd r = c - model.mu().row(k).transpose();
      double term = zeta(t, k) * (-0.5 * p * (kLog2Pi + std::log(s2)) -
                                  (r.squaredNorm() + tr) / (2.0 * s2));
      if (off)
        term += (2.0 * off->first[static_cast<std::size_t>(k)].row(t).dot(r.transpose()) -
                 off->second(t, k)) /
                (2.0 * s2);
      total += term;
    }
  }
  return total;
}

double initial_term(const VectorXd& pi, const MatrixXd& zeta) {
  double v = 0.0;
  for (Index k = 0; k < pi.size(); ++k)
    if (zeta(0, k) != 0.0) v += zeta(0, k) * std::log(pi(k));
  return v;
}

double transition_term(const MatrixXd& gamma, const std::vector<MatrixXd>& xi) {
  double v = 0.0;
  for (const auto& x : xi)
    for (Index k = 0; k < gamma.rows(); ++k)
      for (Index l = 0; l < gamma.cols(); ++l)
        if (x(k, l) != 0.0) v += x(k, l) * std::log(gamma(k, l));
  return v;
}

}  // namespace detail

}  // namespace avem::mhmm
