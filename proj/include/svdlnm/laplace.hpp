#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "svdlnm/model.hpp"

namespace svdlnm {

struct FamilyParams {
  Family family = Family::Poisson;
  double phi = 1.0;  // NB dispersion; ignored for Poisson
};

inline constexpr double kLinearPredictorCap = 50.0;

struct LinearPredictorOverflow : std::domain_error {
  LinearPredictorOverflow()
      : std::domain_error("linear predictor exceeds +-50; refusing to evaluate") {}
};

/// Per-row log density at linear predictor eta (mu = exp(eta)), including
/// normalizing constants.
inline double log_density_row(double y, double eta, const FamilyParams& fp) {
  if (fp.family == Family::Poisson)
    return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
  const double phi = fp.phi;
  const double mu = std::exp(eta);
  return std::lgamma(y + phi) - std::lgamma(phi) - std::lgamma(y + 1.0) +
         phi * std::log(phi) + y * eta - (y + phi) * std::log(phi + mu);
}

inline double loglik_from_eta(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                              const FamilyParams& fp) {
  if (eta.cwiseAbs().maxCoeff() > kLinearPredictorCap) throw LinearPredictorOverflow();
  if (fp.family == Family::NegBinomial && !std::isfinite(fp.phi))
    throw std::runtime_error("non-finite dispersion parameter");
  double s = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) s += log_density_row(y[i], eta[i], fp);
  if (!std::isfinite(s)) throw std::runtime_error("non-finite log-likelihood");
  return s;
}

/// Full log-likelihood at xi, summed over valid rows.
inline double loglik(const Eigen::VectorXd& xi, const ModelMatrices& mm,
                     const FamilyParams& fp) {
  return loglik_from_eta(mm.linear_predictor(xi), mm.y, fp);
}

/// Working residual r and negative-Hessian weight v per row, so that
/// grad loglik = X'r and hess loglik = -X'diag(v)X.
/// Poisson: r = y - mu, v = mu. Negative binomial: r = (y - mu) phi/(mu+phi),
/// v = mu phi (y + phi) / (mu + phi)^2 (observed, not expected, information).
inline void working_terms(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                          const FamilyParams& fp, Eigen::VectorXd& r,
                          Eigen::VectorXd& v) {
  const Eigen::Index n = eta.size();
  r.resize(n);
  v.resize(n);
  if (fp.family == Family::Poisson) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double mu = std::exp(eta[i]);
      if (!std::isfinite(mu)) throw std::runtime_error("non-finite mean in likelihood");
      r[i] = y[i] - mu;
      v[i] = mu;
    }
  } else {
    const double phi = fp.phi;
    if (!std::isfinite(phi) || phi <= 0.0)
      throw std::runtime_error("invalid dispersion parameter");
    for (Eigen::Index i = 0; i < n; ++i) {
      double mu = std::exp(eta[i]);
      if (!std::isfinite(mu)) throw std::runtime_error("non-finite mean in likelihood");
      double denom = mu + phi;
      r[i] = phi * (y[i] - mu) / denom;
      v[i] = mu * phi * (y[i] + phi) / (denom * denom);
      if (!std::isfinite(v[i])) throw std::runtime_error("non-finite curvature in likelihood");
    }
  }
}

/// grad loglik = X'r, assembled through the per-area blocks.
inline Eigen::VectorXd design_transpose_times(const ModelMatrices& mm,
                                              const Eigen::VectorXd& r) {
  const auto& bm = mm.blocks;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(bm.total);
  Eigen::Index row = 0;
  for (int j = 0; j < mm.J; ++j) {
    const Eigen::Index nj = mm.area_W[j].rows();
    const auto rj = r.segment(row, nj);
    g.segment(bm.beta_start, bm.beta_count).noalias() += mm.area_A[j].transpose() * rj;
    Eigen::VectorXd wr = mm.area_W[j].transpose() * rj;
    g.segment(bm.theta_start, bm.theta_count) += wr;
    if (mm.has_theta_j) g.segment(bm.theta_j_start + j * mm.p, mm.p) = wr;
    if (bm.u_count > 0) g[bm.u_start + j] = rj.sum();
    row += nj;
  }
  return g;
}

/// Analytic gradient of the log-likelihood and the sparse negative Hessian
/// X'diag(v)X (returned as its lower triangle in `neg_hess`).
struct GradHess {
  Eigen::VectorXd gradient;
  Eigen::SparseMatrix<double> neg_hess;  // lower triangle of X'VX
};

namespace detail {

/// Lower-triangle triplets of X'diag(v)X, exploiting that all cross-basis
/// blocks factorize over areas.
inline void xvx_lower_triplets(const ModelMatrices& mm, const Eigen::VectorXd& v,
                               std::vector<Eigen::Triplet<double>>& trips) {
  const auto& bm = mm.blocks;
  const int p = mm.p, nb = bm.beta_count;
  Eigen::MatrixXd s_aa = Eigen::MatrixXd::Zero(nb, nb);
  Eigen::MatrixXd s_aw = Eigen::MatrixXd::Zero(nb, p);
  Eigen::MatrixXd s_ww = Eigen::MatrixXd::Zero(p, p);

  Eigen::Index row = 0;
  std::vector<Eigen::MatrixXd> c_blocks(mm.J), d_blocks(mm.J);
  std::vector<Eigen::VectorXd> w_sums(mm.J), a_sums(mm.J);
  std::vector<double> v_sums(mm.J);
  for (int j = 0; j < mm.J; ++j) {
    const Eigen::Index nj = mm.area_W[j].rows();
    const auto vj = v.segment(row, nj);
    Eigen::MatrixXd wv = vj.asDiagonal() * mm.area_W[j];
    c_blocks[j].noalias() = mm.area_W[j].transpose() * wv;
    d_blocks[j].noalias() = mm.area_A[j].transpose() * wv;
    w_sums[j].noalias() = mm.area_W[j].transpose() * vj;
    a_sums[j].noalias() = mm.area_A[j].transpose() * vj;
    v_sums[j] = vj.sum();
    s_aa.noalias() += mm.area_A[j].transpose() * (vj.asDiagonal() * mm.area_A[j]);
    s_aw += d_blocks[j];
    s_ww += c_blocks[j];
    row += nj;
  }

  auto add_lower = [&trips](int r0, int c0, const Eigen::MatrixXd& m, bool diag_block) {
    for (int c = 0; c < m.cols(); ++c)
      for (int r = diag_block ? c : 0; r < m.rows(); ++r)
        if (m(r, c) != 0.0) trips.emplace_back(r0 + r, c0 + c, m(r, c));
  };

  add_lower(bm.beta_start, bm.beta_start, s_aa, true);
  add_lower(bm.theta_start, bm.beta_start, s_aw.transpose(), false);
  add_lower(bm.theta_start, bm.theta_start, s_ww, true);
  for (int j = 0; j < mm.J; ++j) {
    if (mm.has_theta_j) {
      const int tj0 = bm.theta_j_start + j * p;
      add_lower(tj0, bm.beta_start, d_blocks[j].transpose(), false);
      add_lower(tj0, bm.theta_start, c_blocks[j], false);
      add_lower(tj0, tj0, c_blocks[j], true);
    }
    if (bm.u_count > 0) {
      const int uj = bm.u_start + j;
      for (int c = 0; c < nb; ++c)
        if (a_sums[j][c] != 0.0) trips.emplace_back(uj, bm.beta_start + c, a_sums[j][c]);
      for (int c = 0; c < p; ++c) {
        if (w_sums[j][c] != 0.0) {
          trips.emplace_back(uj, bm.theta_start + c, w_sums[j][c]);
          if (mm.has_theta_j)
            trips.emplace_back(uj, bm.theta_j_start + j * p + c, w_sums[j][c]);
        }
      }
      trips.emplace_back(uj, uj, v_sums[j]);
    }
  }
}

inline void append_lower_of(const Eigen::SparseMatrix<double>& m,
                            std::vector<Eigen::Triplet<double>>& trips) {
  for (int k = 0; k < m.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it)
      if (it.row() >= it.col()) trips.emplace_back(it.row(), it.col(), it.value());
}

}  // namespace detail

/// Gradient of the log-likelihood and its negative Hessian at xi.
inline GradHess grad_hess(const Eigen::VectorXd& xi, const ModelMatrices& mm,
                          const FamilyParams& fp) {
  Eigen::VectorXd eta = mm.linear_predictor(xi);
  if (eta.cwiseAbs().maxCoeff() > kLinearPredictorCap) throw LinearPredictorOverflow();
  Eigen::VectorXd r, v;
  working_terms(eta, mm.y, fp, r, v);
  GradHess gh;
  gh.gradient = design_transpose_times(mm, r);
  std::vector<Eigen::Triplet<double>> trips;
  detail::xvx_lower_triplets(mm, v, trips);
  gh.neg_hess.resize(mm.blocks.total, mm.blocks.total);
  gh.neg_hess.setFromTriplets(trips.begin(), trips.end());
  return gh;
}

/// Conditional log-posterior log L(xi) - xi'Q xi / 2 (prior determinant terms
/// are handled by the hyperparameter objective, not here).
inline double conditional_logpost(const Eigen::VectorXd& xi, const ModelMatrices& mm,
                                  const Eigen::SparseMatrix<double>& Q,
                                  const FamilyParams& fp) {
  return loglik(xi, mm, fp) - 0.5 * xi.dot(Q * xi);
}

struct NewtonSettings {
  double grad_tol_rel = 1e-8;  // tolerance is grad_tol_rel * (1 + ||X'y||_inf)
  double step_tol = 1e-9;
  int max_iter = 100;
  int max_halvings = 30;
};

/// Gaussian approximation at the conditional posterior mode. The precision
/// factorization is stored explicitly (permutation + sparse Cholesky factor
/// of X'VX + Q), so the object is self-contained and serializable:
///   negH = P' L L' P,   Sigma = P' L^{-T} L^{-1} P.
struct GaussianApprox {
  Eigen::VectorXd mode;
  Eigen::SparseMatrix<double> factor_L;
  Eigen::VectorXi perm;  // P as index map: (P x)[i] = x[perm[i]]
  double log_det_sigma = 0.0;
  double loglik_at_mode = 0.0;
  int iterations = 0;
  bool converged = false;

  Eigen::Index dim() const { return mode.size(); }

  Eigen::VectorXd apply_perm(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out[perm[i]] = x[i];
    return out;
  }

  Eigen::VectorXd apply_perm_inv(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = x[perm[i]];
    return out;
  }

  /// c' Sigma c via one triangular solve.
  double quad_cov(const Eigen::VectorXd& c) const {
    Eigen::VectorXd t = apply_perm(c);
    factor_L.triangularView<Eigen::Lower>().solveInPlace(t);
    return t.squaredNorm();
  }

  /// Sigma v.
  Eigen::VectorXd cov_solve(const Eigen::VectorXd& v) const {
    Eigen::VectorXd t = apply_perm(v);
    factor_L.triangularView<Eigen::Lower>().solveInPlace(t);
    factor_L.transpose().triangularView<Eigen::Upper>().solveInPlace(t);
    return apply_perm_inv(t);
  }

  /// mode + P' L^{-T} z for a standard normal z: one draw from N(mode, Sigma).
  Eigen::VectorXd sample_with_std_normal(const Eigen::VectorXd& z) const {
    Eigen::VectorXd t = z;
    factor_L.transpose().triangularView<Eigen::Upper>().solveInPlace(t);
    return mode + apply_perm_inv(t);
  }
};

/// Reusable Newton state: the symbolic factorization is kept across calls
/// with the same sparsity (warm-started hyperparameter evaluations).
struct NewtonWorkspace {
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt;
  Eigen::Index analyzed_nnz = -1;
};

struct NewtonFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Damped Newton-Raphson for the conditional posterior mode. Step-halving
/// keeps the conditional log-posterior non-decreasing; trial steps whose
/// linear predictor exceeds the cap trigger an extra halving.
inline GaussianApprox newton_mode(const ModelMatrices& mm,
                                  const Eigen::SparseMatrix<double>& Q,
                                  const FamilyParams& fp,
                                  const Eigen::VectorXd& xi0 = Eigen::VectorXd(),
                                  const NewtonSettings& settings = NewtonSettings(),
                                  NewtonWorkspace* workspace = nullptr,
                                  std::vector<double>* logpost_trace = nullptr) {
  const auto& bm = mm.blocks;
  Eigen::VectorXd xi = xi0.size() == bm.total ? xi0 : Eigen::VectorXd::Zero(bm.total);

  const double grad_scale = 1.0 + design_transpose_times(mm, mm.y).cwiseAbs().maxCoeff();
  const double grad_tol = settings.grad_tol_rel * grad_scale;

  NewtonWorkspace local_ws;
  NewtonWorkspace& ws = workspace ? *workspace : local_ws;

  Eigen::VectorXd eta = mm.linear_predictor(xi);
  if (eta.cwiseAbs().maxCoeff() > kLinearPredictorCap)
    throw NewtonFailure("newton: initial point exceeds the linear predictor cap");
  double lp = loglik_from_eta(eta, mm.y, fp) - 0.5 * xi.dot(Q * xi);
  if (logpost_trace) logpost_trace->push_back(lp);

  Eigen::SparseMatrix<double> neg_hess(bm.total, bm.total);
  std::vector<Eigen::Triplet<double>> trips;
  Eigen::VectorXd r, v;
  bool converged = false;
  int iter = 0;

  for (; iter < settings.max_iter; ++iter) {
    working_terms(eta, mm.y, fp, r, v);
    Eigen::VectorXd grad = design_transpose_times(mm, r) - Q * xi;
    if (grad.cwiseAbs().maxCoeff() < grad_tol) {
      converged = true;
      break;
    }

    trips.clear();
    detail::xvx_lower_triplets(mm, v, trips);
    detail::append_lower_of(Q, trips);
    neg_hess.setFromTriplets(trips.begin(), trips.end());
    if (ws.analyzed_nnz != neg_hess.nonZeros()) {
      ws.llt.analyzePattern(neg_hess);
      ws.analyzed_nnz = neg_hess.nonZeros();
    }
    ws.llt.factorize(neg_hess);
    if (ws.llt.info() != Eigen::Success)
      throw NewtonFailure("newton: factorization of X'VX + Q failed");
    Eigen::VectorXd step = ws.llt.solve(grad);

    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd xi_try, eta_try;
    double lp_try = 0.0;
    for (int h = 0; h <= settings.max_halvings; ++h, t *= 0.5) {
      xi_try = xi + t * step;
      eta_try = mm.linear_predictor(xi_try);
      if (eta_try.cwiseAbs().maxCoeff() > kLinearPredictorCap) continue;  // halve again
      lp_try = loglik_from_eta(eta_try, mm.y, fp) - 0.5 * xi_try.dot(Q * xi_try);
      if (std::isnan(lp_try)) throw NewtonFailure("newton: log-posterior became NaN");
      if (lp_try >= lp - 1e-10 * (1.0 + std::abs(lp))) {
        accepted = true;
        break;
      }
    }
    if (!accepted)
      throw NewtonFailure("newton: step halving exhausted without ascent (divergence)");

    double step_size = (xi_try - xi).cwiseAbs().maxCoeff();
    xi = xi_try;
    eta = eta_try;
    lp = std::max(lp, lp_try);
    if (logpost_trace) logpost_trace->push_back(lp_try);
    if (step_size < settings.step_tol * (1.0 + xi.cwiseAbs().maxCoeff())) {
      converged = true;
      ++iter;
      break;
    }
  }
  if (!converged)
    throw NewtonFailure("newton: max_iter exceeded without convergence");

  // Final curvature at the mode.
  working_terms(eta, mm.y, fp, r, v);
  trips.clear();
  detail::xvx_lower_triplets(mm, v, trips);
  detail::append_lower_of(Q, trips);
  neg_hess.setFromTriplets(trips.begin(), trips.end());
  if (ws.analyzed_nnz != neg_hess.nonZeros()) {
    ws.llt.analyzePattern(neg_hess);
    ws.analyzed_nnz = neg_hess.nonZeros();
  }
  ws.llt.factorize(neg_hess);
  if (ws.llt.info() != Eigen::Success)
    throw NewtonFailure("newton: factorization at the mode failed");

  GaussianApprox ga;
  ga.mode = xi;
  ga.factor_L = ws.llt.matrixL();
  ga.perm = ws.llt.permutationP().indices();
  double log_det_negh = 0.0;
  for (Eigen::Index k = 0; k < ga.factor_L.rows(); ++k)
    log_det_negh += 2.0 * std::log(ga.factor_L.coeff(k, k));
  ga.log_det_sigma = -log_det_negh;
  ga.loglik_at_mode = loglik_from_eta(eta, mm.y, fp);
  ga.iterations = iter;
  ga.converged = true;
  return ga;
}

}  // namespace svdlnm
