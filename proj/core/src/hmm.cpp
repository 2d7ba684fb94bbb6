#include "avem/hmm.hpp"

#include "avem/error.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <string>

namespace avem::hmm {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kProbFloor = 1e-300;

std::atomic<std::uint64_t> g_forward_passes{0};

void check_inputs(const EmissionLogMatrix& log_e, const ChainParams& chain) {
  chain.validate();
  if (log_e.rows() < 1) throw DimensionError("hmm: sequence length must be >= 1");
  if (log_e.cols() != chain.n_states())
    throw DimensionError("hmm: emission matrix has " + std::to_string(log_e.cols()) +
                         " columns but chain has " + std::to_string(chain.n_states()) +
                         " states");
  if (!log_e.allFinite()) throw DimensionError("hmm: non-finite emission log-density");
}

double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

}  // namespace

void ChainParams::validate() const {
  const Index k = pi.size();
  if (k < 1) throw DimensionError("ChainParams: need at least one state");
  if (gamma.rows() != k || gamma.cols() != k)
    throw DimensionError("ChainParams: transition matrix must be K x K");
  if ((pi.array() < 0.0).any() || (gamma.array() < 0.0).any() || !pi.allFinite() ||
      !gamma.allFinite())
    throw DimensionError("ChainParams: probabilities must be finite and nonnegative");
  if (std::abs(pi.sum() - 1.0) > 1e-12)
    throw DimensionError("ChainParams: initial law does not sum to one");
  for (Index r = 0; r < k; ++r)
    if (std::abs(gamma.row(r).sum() - 1.0) > 1e-12)
      throw DimensionError("ChainParams: transition row " + std::to_string(r) +
                           " does not sum to one");
}

MatrixXd forward_pass(const EmissionLogMatrix& log_e, const ChainParams& chain) {
  check_inputs(log_e, chain);
  g_forward_passes.fetch_add(1, std::memory_order_relaxed);
  const Index t_len = log_e.rows();
  const Index k = chain.n_states();
  const MatrixXd log_gamma = chain.gamma.unaryExpr(&safe_log);

  MatrixXd log_alpha(t_len, k);
  for (Index s = 0; s < k; ++s) log_alpha(0, s) = safe_log(chain.pi(s)) + log_e(0, s);
  VectorXd terms(k);
  for (Index t = 1; t < t_len; ++t) {
    for (Index s = 0; s < k; ++s) {
      for (Index r = 0; r < k; ++r) terms(r) = log_alpha(t - 1, r) + log_gamma(r, s);
      log_alpha(t, s) = log_sum_exp(terms) + log_e(t, s);
    }
  }
  return log_alpha;
}

MatrixXd backward_pass(const EmissionLogMatrix& log_e, const ChainParams& chain) {
  check_inputs(log_e, chain);
  const Index t_len = log_e.rows();
  const Index k = chain.n_states();
  const MatrixXd log_gamma = chain.gamma.unaryExpr(&safe_log);

  MatrixXd log_beta(t_len, k);
  log_beta.row(t_len - 1).setZero();
  VectorXd terms(k);
  for (Index t = t_len - 2; t >= 0; --t) {
    for (Index r = 0; r < k; ++r) {
      for (Index s = 0; s < k; ++s)
        terms(s) = log_gamma(r, s) + log_e(t + 1, s) + log_beta(t + 1, s);
      log_beta(t, r) = log_sum_exp(terms);
    }
  }
  return log_beta;
}

double conditional_log_marginal(const MatrixXd& log_alpha) {
  if (log_alpha.rows() < 1) throw DimensionError("conditional_log_marginal: empty input");
  const VectorXd last = log_alpha.row(log_alpha.rows() - 1).transpose();
  if (last.array().isNaN().any())
    throw NumericalError("conditional_log_marginal: NaN in forward variables");
  return log_sum_exp(last);
}

StatePosterior state_posteriors(const MatrixXd& log_alpha, const MatrixXd& log_beta,
                                const ChainParams& chain, const EmissionLogMatrix& log_e) {
  const Index t_len = log_e.rows();
  const Index k = chain.n_states();
  if (log_alpha.rows() != t_len || log_beta.rows() != t_len || log_alpha.cols() != k ||
      log_beta.cols() != k || log_e.cols() != k)
    throw DimensionError("state_posteriors: inconsistent dimensions");

  StatePosterior post;
  post.log_marginal = conditional_log_marginal(log_alpha);
  if (!std::isfinite(post.log_marginal))
    throw NumericalError("state_posteriors: degenerate likelihood (all paths have zero "
                         "probability)");
  const double lz = post.log_marginal;
  const MatrixXd log_gamma = chain.gamma.unaryExpr(&safe_log);

  post.zeta.resize(t_len, k);
  for (Index t = 0; t < t_len; ++t) {
    double total = 0.0;
    for (Index s = 0; s < k; ++s) {
      post.zeta(t, s) = std::exp(log_alpha(t, s) + log_beta(t, s) - lz);
      total += post.zeta(t, s);
    }
    post.zeta.row(t) /= total;
  }

  post.xi.assign(static_cast<std::size_t>(std::max<Index>(t_len - 1, 0)), MatrixXd(k, k));
  for (Index t = 0; t + 1 < t_len; ++t) {
    MatrixXd& x = post.xi[static_cast<std::size_t>(t)];
    for (Index r = 0; r < k; ++r)
      for (Index s = 0; s < k; ++s)
        x(r, s) = std::exp(log_alpha(t, r) + log_gamma(r, s) + log_e(t + 1, s) +
                           log_beta(t + 1, s) - lz);
    const double total = x.sum();
    if (total > 0.0) x /= total;
  }
  return post;
}

StatePosterior forward_backward(const EmissionLogMatrix& log_e, const ChainParams& chain) {
  const MatrixXd log_alpha = forward_pass(log_e, chain);
  const MatrixXd log_beta = backward_pass(log_e, chain);
  return state_posteriors(log_alpha, log_beta, chain, log_e);
}

double posterior_entropy(const StatePosterior& post) {
  const Index t_len = post.length();
  const Index k = post.n_states();
  double h = 0.0;
  for (Index s = 0; s < k; ++s) {
    const double z = post.zeta(0, s);
    if (z > 0.0) h -= z * std::log(z);
  }
  for (Index t = 0; t + 1 < t_len; ++t) {
    const MatrixXd& x = post.xi[static_cast<std::size_t>(t)];
    for (Index r = 0; r < k; ++r) {
      const double denom = std::max(post.zeta(t, r), kProbFloor);
      for (Index s = 0; s < k; ++s) {
        const double v = x(r, s);
        if (v > 0.0) h -= v * std::log(std::max(v, kProbFloor) / denom);
      }
    }
  }
  return h;
}

std::uint64_t forward_pass_count() { return g_forward_passes.load(std::memory_order_relaxed); }

}  // namespace avem::hmm
