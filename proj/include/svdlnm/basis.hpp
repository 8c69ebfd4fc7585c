#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <stdexcept>
#include <vector>

namespace svdlnm {

enum class BasisKind { BSpline, Natural };

/// One marginal spline basis (exposure or lag dimension).
///
/// BSpline: cubic-by-default B-splines on a clamped knot vector with equally
/// spaced interior knots spanning [lo, hi]. Evaluation points are clamped to
/// the boundary. Rows sum to one everywhere inside the boundary.
///
/// Natural: natural cubic splines with the given interior knots and boundary
/// knots at lo/hi, linear beyond the boundary. Columns exclude the constant
/// function; an intercept is handled by the model.
struct MarginalBasis {
  BasisKind kind = BasisKind::BSpline;
  int num_functions = 0;
  Eigen::VectorXd knots;  // BSpline: full clamped knot vector; Natural: all knots lo..hi
  int degree = 3;         // BSpline only
  double lo = 0.0;
  double hi = 1.0;

  Eigen::RowVectorXd eval(double x) const;

  Eigen::MatrixXd eval(const Eigen::VectorXd& points) const {
    Eigen::MatrixXd out(points.size(), num_functions);
    for (Eigen::Index i = 0; i < points.size(); ++i) out.row(i) = eval(points[i]);
    return out;
  }
};

namespace detail {

/// Cox-de Boor evaluation of all B-spline basis functions of order k
/// (degree k-1) at x, given the full knot vector. Returns the row of
/// num_basis = knots.size() - k values.
inline Eigen::RowVectorXd bspline_row(double x, int order,
                                      const Eigen::VectorXd& knots) {
  const int n_basis = static_cast<int>(knots.size()) - order;
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n_basis);

  // Find span i with knots[i] <= x < knots[i+1], restricted to the valid
  // range [order-1, n_basis-1]; the right boundary maps to the last span.
  int lo_span = order - 1;
  int hi_span = n_basis - 1;
  int span = hi_span;
  if (x < knots[hi_span]) {
    span = static_cast<int>(
               std::upper_bound(knots.data() + lo_span, knots.data() + hi_span + 1, x) -
               knots.data()) - 1;
    span = std::clamp(span, lo_span, hi_span);
  }

  // Triangular recurrence over the `order` nonzero functions on the span.
  std::vector<double> vals(order, 0.0), left(order, 0.0), right(order, 0.0);
  vals[0] = 1.0;
  for (int j = 1; j < order; ++j) {
    left[j] = x - knots[span + 1 - j];
    right[j] = knots[span + j] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      double denom = right[r + 1] + left[j - r];
      double temp = (denom != 0.0) ? vals[r] / denom : 0.0;
      vals[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    vals[j] = saved;
  }
  for (int r = 0; r < order; ++r) {
    int idx = span - order + 1 + r;
    if (idx >= 0 && idx < n_basis) row[idx] = vals[r];
  }
  return row;
}

/// Natural cubic spline basis of Hastie et al.: with knots xi_1 < ... < xi_K
/// the K-1 non-constant functions are {x, d_1 - d_{K-1}, ..., d_{K-2} - d_{K-1}}
/// where d_k(x) = ((x-xi_k)^3_+ - (x-xi_K)^3_+) / (xi_K - xi_k).
inline Eigen::RowVectorXd natural_row(double x, const Eigen::VectorXd& xi) {
  const int K = static_cast<int>(xi.size());
  auto cube_plus = [](double v) { return v > 0.0 ? v * v * v : 0.0; };
  auto d = [&](int k) {
    return (cube_plus(x - xi[k]) - cube_plus(x - xi[K - 1])) / (xi[K - 1] - xi[k]);
  };
  Eigen::RowVectorXd row(K - 1);
  row[0] = x;
  double d_last = d(K - 2);
  for (int k = 0; k < K - 2; ++k) row[k + 1] = d(k) - d_last;
  return row;
}

}  // namespace detail

inline Eigen::RowVectorXd MarginalBasis::eval(double x) const {
  if (!std::isfinite(x)) throw std::invalid_argument("basis evaluated at non-finite point");
  if (kind == BasisKind::BSpline) {
    double xc = std::clamp(x, lo, hi);
    return detail::bspline_row(xc, degree + 1, knots);
  }
  return detail::natural_row(x, knots);
}

/// B-spline basis with df functions of the given degree on equally spaced
/// knots spanning [lo, hi] (clamped knot vector, df - degree - 1 interior knots).
inline MarginalBasis make_bspline_basis(int df, int degree, double lo, double hi) {
  if (degree < 0) throw std::invalid_argument("bspline degree must be >= 0");
  if (df < degree + 1) throw std::invalid_argument("bspline df must be >= degree+1");
  if (!(lo < hi)) throw std::invalid_argument("degenerate basis boundary");
  const int order = degree + 1;
  const int n_interior = df - order;
  Eigen::VectorXd knots(df + order);
  for (int i = 0; i < order; ++i) knots[i] = lo;
  for (int i = 0; i < n_interior; ++i)
    knots[order + i] = lo + (hi - lo) * (i + 1) / (n_interior + 1);
  for (int i = 0; i < order; ++i) knots[df + i] = hi;
  MarginalBasis b;
  b.kind = BasisKind::BSpline;
  b.num_functions = df;
  b.knots = std::move(knots);
  b.degree = degree;
  b.lo = lo;
  b.hi = hi;
  return b;
}

/// Natural cubic spline basis with the given interior knots; yields
/// interior_knots.size() + 1 columns. Linear beyond [lo, hi].
inline MarginalBasis make_natural_basis(const Eigen::VectorXd& interior_knots,
                                        double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("degenerate basis boundary");
  const int m = static_cast<int>(interior_knots.size());
  Eigen::VectorXd xi(m + 2);
  xi[0] = lo;
  for (int i = 0; i < m; ++i) {
    if (!(interior_knots[i] > lo && interior_knots[i] < hi))
      throw std::invalid_argument("natural spline interior knot outside boundary");
    if (i > 0 && !(interior_knots[i] > interior_knots[i - 1]))
      throw std::invalid_argument("natural spline knots must be strictly increasing");
    xi[i + 1] = interior_knots[i];
  }
  xi[m + 1] = hi;
  MarginalBasis b;
  b.kind = BasisKind::Natural;
  b.num_functions = m + 1;
  b.knots = std::move(xi);
  b.lo = lo;
  b.hi = hi;
  return b;
}

inline Eigen::MatrixXd bspline_basis(const Eigen::VectorXd& points, int df,
                                     int degree, double lo, double hi) {
  return make_bspline_basis(df, degree, lo, hi).eval(points);
}

inline Eigen::MatrixXd natural_spline_basis(const Eigen::VectorXd& points,
                                            const Eigen::VectorXd& interior_knots,
                                            double lo, double hi) {
  return make_natural_basis(interior_knots, lo, hi).eval(points);
}

/// Symmetric PSD penalty; strictly PD when ridge > 0.
struct PenaltyMatrix {
  int size = 0;
  Eigen::MatrixXd entries;
  double ridge = 0.0;
};

/// Order-m difference matrix D of shape (size-order) x size.
inline Eigen::MatrixXd difference_matrix(int size, int order) {
  if (size <= order || order < 1)
    throw std::invalid_argument("difference matrix requires size > order >= 1");
  Eigen::MatrixXd d = Eigen::MatrixXd::Identity(size, size);
  for (int m = 0; m < order; ++m) {
    int rows = size - m - 1;
    Eigen::MatrixXd step = Eigen::MatrixXd::Zero(rows, rows + 1);
    for (int i = 0; i < rows; ++i) {
      step(i, i) = -1.0;
      step(i, i + 1) = 1.0;
    }
    d = step * d;
  }
  return d;
}

/// S = D'D + ridge * I with D the order-m difference matrix.
inline PenaltyMatrix difference_penalty(int size, int order, double ridge) {
  if (ridge < 0.0) throw std::invalid_argument("ridge must be >= 0");
  Eigen::MatrixXd d = difference_matrix(size, order);
  PenaltyMatrix p;
  p.size = size;
  p.entries = d.transpose() * d;
  p.entries.diagonal().array() += ridge;
  p.ridge = ridge;
  return p;
}

/// Diagonal lag-shrink penalty diag(0, 1, 4, ..., (v_l-1)^2) + ridge * I.
inline PenaltyMatrix lag_shrink_penalty(int v_l, double ridge) {
  if (v_l < 1) throw std::invalid_argument("lag shrink penalty requires v_l >= 1");
  if (ridge < 0.0) throw std::invalid_argument("ridge must be >= 0");
  PenaltyMatrix p;
  p.size = v_l;
  p.entries = Eigen::MatrixXd::Zero(v_l, v_l);
  for (int k = 0; k < v_l; ++k) p.entries(k, k) = static_cast<double>(k) * k + ridge;
  p.ridge = ridge;
  return p;
}

}  // namespace svdlnm
