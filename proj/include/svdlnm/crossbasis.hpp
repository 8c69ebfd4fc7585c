#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "svdlnm/basis.hpp"

namespace svdlnm {

/// Tensor-product cross-basis for the exposure-lag-response surface.
/// Flattening is exposure-major: coefficient (i, k) of the v_x x v_l grid
/// lives at index i * v_l + k (0-based), matching theta = (theta_11, ...,
/// theta_1v_l, ..., theta_{v_x v_l}).
struct CrossBasis {
  MarginalBasis exposure_basis;
  MarginalBasis lag_basis;
  int max_lag = 0;
  Eigen::MatrixXd lag_basis_matrix;  // (L+1) x v_l, row l = lag basis at lag l

  int v_x() const { return exposure_basis.num_functions; }
  int v_l() const { return lag_basis.num_functions; }
  int dim() const { return v_x() * v_l(); }
  int flat_index(int i, int k) const { return i * v_l() + k; }
};

inline CrossBasis make_cross_basis(MarginalBasis exposure, MarginalBasis lag, int max_lag) {
  if (max_lag < 0) throw std::invalid_argument("max_lag must be >= 0");
  CrossBasis cb;
  cb.exposure_basis = std::move(exposure);
  cb.lag_basis = std::move(lag);
  cb.max_lag = max_lag;
  Eigen::VectorXd lags(max_lag + 1);
  for (int l = 0; l <= max_lag; ++l) lags[l] = static_cast<double>(l);
  cb.lag_basis_matrix = cb.lag_basis.eval(lags);
  return cb;
}

/// Trailing exposure windows q_t = (x_t, x_{t-1}, ..., x_{t-L}) for one
/// area's time-ordered series. Rows with fewer than L+1 observations of
/// history are flagged invalid and must be excluded from the likelihood.
struct LagWindows {
  Eigen::MatrixXd q;         // T x (L+1); invalid rows zero-filled
  std::vector<char> valid;   // per row
  int num_valid = 0;
};

inline LagWindows lag_matrix(const Eigen::VectorXd& series, int max_lag) {
  if (series.size() < max_lag + 1)
    throw std::invalid_argument("series shorter than max_lag + 1");
  const int T = static_cast<int>(series.size());
  LagWindows lw;
  lw.q = Eigen::MatrixXd::Zero(T, max_lag + 1);
  lw.valid.assign(T, 0);
  for (int t = max_lag; t < T; ++t) {
    for (int l = 0; l <= max_lag; ++l) lw.q(t, l) = series[t - l];
    lw.valid[t] = 1;
    ++lw.num_valid;
  }
  return lw;
}

/// Cross-basis row w with w[(i,k)] = sum_l b~_i(q_l) * b^_k(l).
inline Eigen::VectorXd cross_basis_row(const Eigen::VectorXd& q, const CrossBasis& cb) {
  if (q.size() != cb.max_lag + 1)
    throw std::invalid_argument("exposure window length must be max_lag + 1");
  if (!q.allFinite())
    throw std::invalid_argument("exposure window contains non-finite values");
  const int vx = cb.v_x(), vl = cb.v_l();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(vx * vl);
  for (int l = 0; l <= cb.max_lag; ++l) {
    Eigen::RowVectorXd bx = cb.exposure_basis.eval(q[l]);
    for (int i = 0; i < vx; ++i) {
      double bi = bx[i];
      if (bi == 0.0) continue;
      for (int k = 0; k < vl; ++k)
        w[i * vl + k] += bi * cb.lag_basis_matrix(l, k);
    }
  }
  return w;
}

/// Contrast c with c[(i,k)] = (b~_i(x) - b~_i(x0)) * b^_k(l), so that the
/// lag-specific log relative risk equals c' (theta + theta_j).
inline Eigen::VectorXd rr_contrast(const CrossBasis& cb, double x, double x0, int lag) {
  if (lag < 0 || lag > cb.max_lag) throw std::invalid_argument("lag out of range");
  const int vx = cb.v_x(), vl = cb.v_l();
  Eigen::RowVectorXd diff = cb.exposure_basis.eval(x) - cb.exposure_basis.eval(x0);
  Eigen::VectorXd c(vx * vl);
  for (int i = 0; i < vx; ++i)
    for (int k = 0; k < vl; ++k)
      c[i * vl + k] = diff[i] * cb.lag_basis_matrix(lag, k);
  return c;
}

/// Contrast for the overall cumulative log RR: sum of the lag-specific
/// contrasts over lags 0..L.
inline Eigen::VectorXd rr_cumulative_contrast(const CrossBasis& cb, double x, double x0) {
  const int vx = cb.v_x(), vl = cb.v_l();
  Eigen::RowVectorXd diff = cb.exposure_basis.eval(x) - cb.exposure_basis.eval(x0);
  Eigen::RowVectorXd lag_sums = cb.lag_basis_matrix.colwise().sum();
  Eigen::VectorXd c(vx * vl);
  for (int i = 0; i < vx; ++i)
    for (int k = 0; k < vl; ++k)
      c[i * vl + k] = diff[i] * lag_sums[k];
  return c;
}

}  // namespace svdlnm
