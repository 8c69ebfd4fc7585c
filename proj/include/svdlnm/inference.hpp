#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "svdlnm/hyperopt.hpp"
#include "svdlnm/rng.hpp"

namespace svdlnm {

struct RREstimate {
  std::string area_id;
  double x = 0.0;
  double x0 = 0.0;
  int lag = -1;  // -1 marks the overall cumulative quantity
  double log_rr_mean = 0.0;
  double log_rr_sd = 0.0;
  double rr = 1.0;
  double ci_low = 1.0;
  double ci_high = 1.0;
};

/// Embeds a cross-basis contrast into full-xi coordinates: the theta block
/// always, plus area j's theta_J block when present.
inline Eigen::VectorXd embed_contrast(const FitResult& fit, const Eigen::VectorXd& c,
                                      int area) {
  Eigen::VectorXd full = Eigen::VectorXd::Zero(fit.mm.blocks.total);
  full.segment(fit.mm.blocks.theta_start, fit.mm.blocks.theta_count) = c;
  if (fit.mm.has_theta_j)
    full.segment(fit.mm.blocks.theta_j_start + area * fit.mm.p, fit.mm.p) = c;
  return full;
}

/// Lag-specific (lag >= 0) or overall cumulative (lag absent) relative risk
/// at exposure x against reference x0 for one area, with an analytic 95%
/// interval from the Gaussian approximation.
inline RREstimate rr_estimate(const FitResult& fit, int area, double x, double x0,
                              std::optional<int> lag = std::nullopt) {
  if (area < 0 || area >= fit.mm.J) throw std::invalid_argument("unknown area index");
  const auto& b = fit.cb.exposure_basis;
  if (x < b.lo || x > b.hi || x0 < b.lo || x0 > b.hi)
    throw std::invalid_argument("exposure outside the basis boundary");
  Eigen::VectorXd c = lag ? rr_contrast(fit.cb, x, x0, *lag)
                          : rr_cumulative_contrast(fit.cb, x, x0);
  Eigen::VectorXd full = embed_contrast(fit, c, area);
  RREstimate est;
  est.area_id = fit.area_ids.empty() ? std::to_string(area) : fit.area_ids[area];
  est.x = x;
  est.x0 = x0;
  est.lag = lag.value_or(-1);
  est.log_rr_mean = full.dot(fit.approx.mode);
  est.log_rr_sd = std::sqrt(std::max(0.0, fit.approx.quad_cov(full)));
  est.rr = std::exp(est.log_rr_mean);
  est.ci_low = std::exp(est.log_rr_mean - 1.96 * est.log_rr_sd);
  est.ci_high = std::exp(est.log_rr_mean + 1.96 * est.log_rr_sd);
  return est;
}

struct PosteriorDraws {
  Eigen::MatrixXd draws;  // S x n_xi
  std::uint64_t seed = 0;
  int S = 0;
};

/// S draws from N(mode, Sigma); deterministic per seed.
inline PosteriorDraws posterior_draws(const FitResult& fit, int S, std::uint64_t seed) {
  PosteriorDraws pd;
  pd.S = S;
  pd.seed = seed;
  pd.draws.resize(S, fit.approx.dim());
  Rng rng(seed);
  Eigen::VectorXd z(fit.approx.dim());
  for (int s = 0; s < S; ++s) {
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    pd.draws.row(s) = fit.approx.sample_with_std_normal(z).transpose();
  }
  return pd;
}

/// Test hook: draws from caller-supplied standard normal variates
/// (one row per draw; a zero row reproduces the mode exactly).
inline PosteriorDraws posterior_draws_with_z(const FitResult& fit,
                                             const Eigen::MatrixXd& z_rows) {
  PosteriorDraws pd;
  pd.S = static_cast<int>(z_rows.rows());
  pd.draws.resize(pd.S, fit.approx.dim());
  for (int s = 0; s < pd.S; ++s)
    pd.draws.row(s) = fit.approx.sample_with_std_normal(z_rows.row(s).transpose()).transpose();
  return pd;
}

struct DicResult {
  double dic = 0.0;
  double p_d = 0.0;
};

/// DIC = D(mode) + 2 p_D with p_D = n_xi - trace(Q Sigma), the trace taken
/// exactly through per-column solves.
inline DicResult dic(const FitResult& fit) {
  const Eigen::Index n = fit.approx.dim();
  double trace = 0.0;
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (fit.q_hat.outerIndexPtr()[j] == fit.q_hat.outerIndexPtr()[j + 1]) continue;
    e[j] = 1.0;
    Eigen::VectorXd sigma_col = fit.approx.cov_solve(e);
    e[j] = 0.0;
    for (Eigen::SparseMatrix<double>::InnerIterator it(fit.q_hat, j); it; ++it)
      trace += it.value() * sigma_col[it.row()];
  }
  DicResult out;
  out.p_d = static_cast<double>(n) - trace;
  out.dic = -2.0 * fit.approx.loglik_at_mode + 2.0 * out.p_d;
  return out;
}

struct WaicResult {
  double waic = 0.0;
  double lppd = 0.0;
  double p_waic = 0.0;
};

struct CpoResult {
  Eigen::VectorXd cpo;      // per observation
  double neg_sum_log = 0.0;  // -sum_i log CPO_i
};

namespace detail {

/// Streaming per-observation accumulators over draws: Welford mean/variance
/// of the log densities plus stable log-sum-exp of +lpd and -lpd.
struct CriteriaAccumulator {
  Eigen::VectorXd mean, m2;          // Welford
  Eigen::VectorXd max_pos, sum_pos;  // logsumexp(lpd)
  Eigen::VectorXd max_neg, sum_neg;  // logsumexp(-lpd)
  long count = 0;

  explicit CriteriaAccumulator(Eigen::Index n)
      : mean(Eigen::VectorXd::Zero(n)),
        m2(Eigen::VectorXd::Zero(n)),
        max_pos(Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity())),
        sum_pos(Eigen::VectorXd::Zero(n)),
        max_neg(Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity())),
        sum_neg(Eigen::VectorXd::Zero(n)) {}

  void add(const Eigen::VectorXd& lpd) {
    ++count;
    for (Eigen::Index i = 0; i < lpd.size(); ++i) {
      double d = lpd[i] - mean[i];
      mean[i] += d / count;
      m2[i] += d * (lpd[i] - mean[i]);
      if (lpd[i] > max_pos[i]) {
        sum_pos[i] = sum_pos[i] * std::exp(max_pos[i] - lpd[i]) + 1.0;
        max_pos[i] = lpd[i];
      } else {
        sum_pos[i] += std::exp(lpd[i] - max_pos[i]);
      }
      double neg = -lpd[i];
      if (neg > max_neg[i]) {
        sum_neg[i] = sum_neg[i] * std::exp(max_neg[i] - neg) + 1.0;
        max_neg[i] = neg;
      } else {
        sum_neg[i] += std::exp(neg - max_neg[i]);
      }
    }
  }
};

inline CriteriaAccumulator accumulate_log_densities(const FitResult& fit,
                                                    const PosteriorDraws& draws) {
  const Eigen::Index n = fit.mm.num_rows();
  CriteriaAccumulator acc(n);
  Eigen::VectorXd lpd(n);
  FamilyParams fp = fit.family_params();
  for (int s = 0; s < draws.S; ++s) {
    Eigen::VectorXd eta = fit.mm.linear_predictor(draws.draws.row(s).transpose());
    for (Eigen::Index i = 0; i < n; ++i) lpd[i] = log_density_row(fit.mm.y[i], eta[i], fp);
    acc.add(lpd);
  }
  return acc;
}

}  // namespace detail

/// WAIC = -2 (lppd - p_waic): lppd from stable log-mean-exp of per-draw
/// densities, p_waic the summed sample variance of the log densities.
inline WaicResult waic(const FitResult& fit, const PosteriorDraws& draws) {
  auto acc = detail::accumulate_log_densities(fit, draws);
  WaicResult out;
  const double log_s = std::log(static_cast<double>(draws.S));
  for (Eigen::Index i = 0; i < acc.mean.size(); ++i) {
    out.lppd += acc.max_pos[i] + std::log(acc.sum_pos[i]) - log_s;
    if (draws.S > 1) out.p_waic += acc.m2[i] / (draws.S - 1);
  }
  out.waic = -2.0 * (out.lppd - out.p_waic);
  return out;
}

/// WAIC and CPO from one shared pass over the draws.
struct CriteriaPair {
  WaicResult waic;
  CpoResult cpo;
};

inline CriteriaPair waic_and_cpo(const FitResult& fit, const PosteriorDraws& draws) {
  auto acc = detail::accumulate_log_densities(fit, draws);
  CriteriaPair out;
  const double log_s = std::log(static_cast<double>(draws.S));
  out.cpo.cpo.resize(acc.mean.size());
  for (Eigen::Index i = 0; i < acc.mean.size(); ++i) {
    out.waic.lppd += acc.max_pos[i] + std::log(acc.sum_pos[i]) - log_s;
    if (draws.S > 1) out.waic.p_waic += acc.m2[i] / (draws.S - 1);
    double log_cpo = log_s - (acc.max_neg[i] + std::log(acc.sum_neg[i]));
    out.cpo.cpo[i] = std::exp(log_cpo);
    out.cpo.neg_sum_log -= log_cpo;
  }
  out.waic.waic = -2.0 * (out.waic.lppd - out.waic.p_waic);
  return out;
}

/// CPO_i via the harmonic-mean identity, stabilized with log-sum-exp of the
/// negated log densities; summarized as -sum_i log CPO_i.
inline CpoResult cpo(const FitResult& fit, const PosteriorDraws& draws) {
  auto acc = detail::accumulate_log_densities(fit, draws);
  CpoResult out;
  const double log_s = std::log(static_cast<double>(draws.S));
  out.cpo.resize(acc.mean.size());
  for (Eigen::Index i = 0; i < acc.mean.size(); ++i) {
    double log_cpo = log_s - (acc.max_neg[i] + std::log(acc.sum_neg[i]));
    out.cpo[i] = std::exp(log_cpo);
    out.neg_sum_log -= log_cpo;
  }
  return out;
}

/// Posterior probability that each area ranks in the top ceil(f J) by
/// overall cumulative log RR at x vs x0. Ties rank by area index (stable).
/// Common fits carry no area ranking: a uniform vector is returned and
/// `warned` set.
inline Eigen::VectorXd high_risk_prob(const FitResult& fit, const PosteriorDraws& draws,
                                      double x, double x0, double top_fraction,
                                      bool* warned = nullptr) {
  const int J = fit.mm.J;
  if (top_fraction * J < 1.0)
    throw std::invalid_argument("top fraction selects less than one area");
  const int m = static_cast<int>(std::ceil(top_fraction * J));
  if (warned) *warned = false;
  if (!fit.mm.has_theta_j) {
    if (warned) *warned = true;
    return Eigen::VectorXd::Constant(J, static_cast<double>(m) / J);
  }
  Eigen::VectorXd c = rr_cumulative_contrast(fit.cb, x, x0);
  Eigen::VectorXd hits = Eigen::VectorXd::Zero(J);
  std::vector<int> order(J);
  Eigen::VectorXd score(J);
  for (int s = 0; s < draws.S; ++s) {
    const auto xi = draws.draws.row(s);
    double base = xi.segment(fit.mm.blocks.theta_start, fit.mm.p).dot(c);
    for (int j = 0; j < J; ++j)
      score[j] = base + xi.segment(fit.mm.blocks.theta_j_start + j * fit.mm.p, fit.mm.p).dot(c);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&score](int a, int b) { return score[a] > score[b]; });
    for (int k = 0; k < m; ++k) hits[order[k]] += 1.0;
  }
  return hits / static_cast<double>(draws.S);
}

}  // namespace svdlnm
