#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <random>

#include "svdlnm/crossbasis.hpp"

using namespace svdlnm;

namespace {

CrossBasis toy_cb(int vx, int vl, int L) {
  return make_cross_basis(make_bspline_basis(vx, vx >= 4 ? 3 : vx - 1, 0.0, 10.0),
                          make_bspline_basis(vl, vl >= 4 ? 3 : vl - 1, 0.0, std::max(1, L)),
                          L);
}

// Naive triple-loop evaluation of the cross-basis row.
Eigen::VectorXd oracle_row(const Eigen::VectorXd& q, const CrossBasis& cb) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(cb.dim());
  for (int i = 0; i < cb.v_x(); ++i)
    for (int k = 0; k < cb.v_l(); ++k)
      for (int l = 0; l <= cb.max_lag; ++l)
        w[i * cb.v_l() + k] +=
            cb.exposure_basis.eval(q[l])[i] * cb.lag_basis.eval(double(l))[k];
  return w;
}

}  // namespace

TEST_CASE("lag windows: trailing windows and validity") {
  Eigen::VectorXd series(4);
  series << 1, 2, 3, 4;
  auto lw = lag_matrix(series, 2);
  REQUIRE(lw.valid == std::vector<char>{0, 0, 1, 1});
  REQUIRE(lw.num_valid == 2);
  Eigen::VectorXd q3(3), q4(3);
  q3 << 3, 2, 1;
  q4 << 4, 3, 2;
  REQUIRE((lw.q.row(2).transpose() - q3).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((lw.q.row(3).transpose() - q4).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lag windows: L = 0 keeps every row") {
  Eigen::VectorXd series(3);
  series << 5, 6, 7;
  auto lw = lag_matrix(series, 0);
  REQUIRE(lw.num_valid == 3);
  REQUIRE(lw.q.col(0).isApprox(series));
}

TEST_CASE("lag windows: series shorter than L+1 is an error") {
  Eigen::VectorXd series(2);
  series << 1, 2;
  REQUIRE_THROWS_AS(lag_matrix(series, 2), std::invalid_argument);
}

TEST_CASE("windows never cross area boundaries") {
  // Two areas processed independently: the first valid window of area 2
  // contains only area-2 values.
  Eigen::VectorXd a(3), b(3);
  a << 1, 2, 3;
  b << 100, 200, 300;
  auto la = lag_matrix(a, 1);
  auto lb = lag_matrix(b, 1);
  REQUIRE(lb.q(1, 0) == 200.0);
  REQUIRE(lb.q(1, 1) == 100.0);
  REQUIRE(la.q(1, 1) == 1.0);
}

TEST_CASE("cross_basis_row sums ones for constant unit bases") {
  // v_x = v_l = 1 with degree-0 B-splines: each basis is identically 1.
  auto cb = make_cross_basis(make_bspline_basis(1, 0, 0.0, 10.0),
                             make_bspline_basis(1, 0, 0.0, 4.0), 4);
  Eigen::VectorXd q = Eigen::VectorXd::Constant(5, 3.3);
  Eigen::VectorXd w = cross_basis_row(q, cb);
  REQUIRE(w.size() == 1);
  REQUIRE(w[0] == Catch::Approx(5.0));
}

TEST_CASE("constant window factorizes") {
  auto cb = toy_cb(3, 2, 3);
  const double c = 6.2;
  Eigen::VectorXd q = Eigen::VectorXd::Constant(4, c);
  Eigen::VectorXd w = cross_basis_row(q, cb);
  Eigen::RowVectorXd bx = cb.exposure_basis.eval(c);
  Eigen::RowVectorXd lag_sums = cb.lag_basis_matrix.colwise().sum();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 2; ++k)
      REQUIRE(w[i * 2 + k] == Catch::Approx(bx[i] * lag_sums[k]).margin(1e-13));
}

TEST_CASE("cross_basis_row matches the naive triple loop") {
  auto cb = toy_cb(3, 2, 4);
  std::mt19937 gen(5);
  std::uniform_real_distribution<double> unif(0.0, 10.0);
  for (int rep = 0; rep < 20; ++rep) {
    Eigen::VectorXd q(5);
    for (int l = 0; l < 5; ++l) q[l] = unif(gen);
    Eigen::VectorXd w = cross_basis_row(q, cb);
    REQUIRE((w - oracle_row(q, cb)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("cross_basis_row rejects bad windows") {
  auto cb = toy_cb(3, 2, 2);
  Eigen::VectorXd wrong(2);
  wrong << 1, 2;
  REQUIRE_THROWS_AS(cross_basis_row(wrong, cb), std::invalid_argument);
  Eigen::VectorXd nan3 = Eigen::VectorXd::Constant(3, std::nan(""));
  REQUIRE_THROWS_AS(cross_basis_row(nan3, cb), std::invalid_argument);
}

TEST_CASE("rr_contrast basics") {
  auto cb = toy_cb(4, 3, 4);
  REQUIRE(rr_contrast(cb, 7.0, 7.0, 2).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE_THROWS_AS(rr_contrast(cb, 7.0, 5.0, 5), std::invalid_argument);

  // Zero coefficients give zero log RR for any contrast.
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(cb.dim());
  REQUIRE(rr_contrast(cb, 8.0, 5.0, 1).dot(theta) == 0.0);
}

TEST_CASE("rr_contrast matches the direct double sum") {
  auto cb = toy_cb(4, 3, 4);
  std::mt19937 gen(11);
  std::normal_distribution<double> norm(0.0, 1.0);
  Eigen::VectorXd coefs(cb.dim());
  for (int i = 0; i < coefs.size(); ++i) coefs[i] = norm(gen);

  for (int rep = 0; rep < 10; ++rep) {
    double x = 10.0 * (rep + 0.5) / 10.0, x0 = 5.0;
    int lag = rep % 5;
    double direct = 0.0;
    for (int i = 0; i < cb.v_x(); ++i)
      for (int k = 0; k < cb.v_l(); ++k)
        direct += (cb.exposure_basis.eval(x)[i] - cb.exposure_basis.eval(x0)[i]) *
                  cb.lag_basis.eval(double(lag))[k] * coefs[i * cb.v_l() + k];
    REQUIRE(rr_contrast(cb, x, x0, lag).dot(coefs) ==
            Catch::Approx(direct).margin(1e-12));
  }
}

TEST_CASE("cumulative contrast equals the sum over lags") {
  auto cb = toy_cb(4, 3, 6);
  double x = 8.5, x0 = 5.0;
  Eigen::VectorXd total = Eigen::VectorXd::Zero(cb.dim());
  for (int l = 0; l <= 6; ++l) total += rr_contrast(cb, x, x0, l);
  REQUIRE((rr_cumulative_contrast(cb, x, x0) - total).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE(rr_cumulative_contrast(cb, x0, x0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cross_basis_row is linear in the lag basis") {
  auto cb = toy_cb(3, 3, 3);
  Eigen::VectorXd q(4);
  q << 2.0, 4.0, 6.0, 8.0;
  Eigen::VectorXd w = cross_basis_row(q, cb);
  CrossBasis doubled = cb;
  doubled.lag_basis_matrix *= 2.0;
  Eigen::VectorXd w2 = cross_basis_row(q, doubled);
  REQUIRE((w2 - 2.0 * w).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("flattening round-trip is consistent") {
  auto cb = toy_cb(4, 3, 2);
  for (int i = 0; i < cb.v_x(); ++i)
    for (int k = 0; k < cb.v_l(); ++k) {
      int flat = cb.flat_index(i, k);
      REQUIRE(flat / cb.v_l() == i);
      REQUIRE(flat % cb.v_l() == k);
    }
}
